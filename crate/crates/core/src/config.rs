//! Run configuration: one JSON document with `model`, `train`, `data`,
//! `eval` and `analysis` sections. Missing keys take defaults; unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Classes whose default prior is below this count as rare in reports.
    pub rare_class_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            rare_class_threshold: 0.1,
        }
    }
}

impl AnalysisConfig {
    /// Class ids whose prior in `probs` is below the threshold.
    pub fn rare_classes(&self, probs: &[f64]) -> Vec<usize> {
        probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p < self.rare_class_threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: line {line}, column {column}: {msg}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{section}: {msg}")]
    Invalid { section: &'static str, msg: String },
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section, and that the model and data agree on the
    /// image size and class count.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, msg: String| ConfigError::Invalid { section, msg };
        self.train
            .model_config(&self.model)
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.data.validate().map_err(|e| invalid("data", e.to_string()))?;
        self.eval.validate().map_err(|e| invalid("eval", e))?;
        let t = self.analysis.rare_class_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("analysis", format!("rare_class_threshold {t} outside [0, 1]")));
        }
        if self.model.image_size != self.data.image_size {
            return Err(invalid(
                "model",
                format!(
                    "image_size {} differs from data.image_size {}",
                    self.model.image_size, self.data.image_size
                ),
            ));
        }
        if self.model.num_classes != self.data.class_probs.len() {
            return Err(invalid(
                "model",
                format!(
                    "num_classes {} but data has {} classes",
                    self.model.num_classes,
                    self.data.class_probs.len()
                ),
            ));
        }
        Ok(())
    }
}
