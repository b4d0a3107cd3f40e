use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// How decoder content queries are formed from the selected encoder tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Selected encoder tokens are used as content queries directly.
    Baseline,
    /// Content queries are convex combinations of a shared pattern bank.
    Paq,
}

impl FromStr for QueryMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "paq" => Ok(Self::Paq),
            _ => Err(ModelError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Paq => "paq",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d_model: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of decoder queries taken from the encoder (top-K).
    pub num_queries: usize,
    /// Size of the shared pattern bank.
    pub num_patterns: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    /// Hidden width of the two-layer weight generator.
    pub wgen_hidden: usize,
    pub mode: QueryMode,
    /// Derive each layer's position embedding from that layer's refined
    /// references rather than the initial ones.
    pub position_from_refined: bool,
    /// Width and height of the fixed grid anchors.
    pub anchor_size: f64,
    pub pattern_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            image_size: 64,
            patch_size: 8,
            num_queries: 30,
            num_patterns: 8,
            num_layers: 3,
            num_heads: 4,
            num_classes: 6,
            ffn_hidden: 128,
            wgen_hidden: 64,
            mode: QueryMode::Paq,
            position_from_refined: true,
            anchor_size: 0.2,
            pattern_init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for whole-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            image_size: 16,
            patch_size: 4,
            num_queries: 4,
            num_patterns: 3,
            num_layers: 2,
            num_heads: 2,
            num_classes: 3,
            ffn_hidden: 16,
            wgen_hidden: 8,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: QueryMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of encoder tokens.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        let positive = [
            ("d_model", self.d_model),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("num_queries", self.num_queries),
            ("num_patterns", self.num_patterns),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
            ("ffn_hidden", self.ffn_hidden),
            ("wgen_hidden", self.wgen_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(ModelError::ImageSize {
                size: self.image_size,
                patch: self.patch_size,
            });
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return err(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_queries > self.num_tokens() {
            return Err(ModelError::TopK {
                k: self.num_queries,
                tokens: self.num_tokens(),
            });
        }
        if self.num_patterns >= self.num_queries {
            return err(format!(
                "num_patterns {} must be smaller than num_queries {}",
                self.num_patterns, self.num_queries
            ));
        }
        if !(self.anchor_size > 0.0 && self.anchor_size < 1.0) {
            return err(format!("anchor_size {} must lie in (0, 1)", self.anchor_size));
        }
        if !(self.pattern_init_std >= 0.0 && self.pattern_init_std.is_finite()) {
            return err("pattern_init_std must be finite and non-negative".into());
        }
        Ok(())
    }
}
