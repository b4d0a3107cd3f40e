//! The detector: a toy patch encoder, confidence-based top-K selection,
//! optional pattern-composed content queries, and an iterative-refinement
//! transformer decoder with per-layer heads.
//!
//! Parameter names are stable and double as checkpoint tensor names:
//!
//! | prefix            | role                                              |
//! |-------------------|---------------------------------------------------|
//! | `enc.*`           | patch embedding, position table, encoder layer    |
//! | `enc.score`       | per-token class logits used for top-K selection   |
//! | `query_pos.*`     | box → position-embedding MLP shared by all layers |
//! | `dec.{l}.*`       | decoder layer `l` blocks and heads                |
//! | `paq.patterns`    | the `m × d` shared pattern bank (paq mode only)   |
//! | `paq.wgen.*`      | two-layer weight generator (paq mode only)        |

mod config;
mod layers;
mod params;
mod query;

pub use config::{ModelConfig, QueryMode};
pub use params::{BoundParams, ParamStore};
pub use query::{compose_queries, generate_weights, select_topk};

use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;

use layers::{add_attention, add_ffn, add_layer_norm, add_linear, attention, layer_norm, linear, mlp2};
use params::Init;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image size {size} is not divisible by patch size {patch}")]
    ImageSize { size: usize, patch: usize },
    #[error("image is {got}×{got} but the model expects {expected}×{expected}")]
    ImageMismatch { got: usize, expected: usize },
    #[error("cannot select {k} queries from {tokens} tokens")]
    TopK { k: usize, tokens: usize },
    #[error("weight matrix has {got} columns but the pattern bank has {patterns} rows")]
    WeightColumns { got: usize, patterns: usize },
    #[error("unknown query mode {0:?} (expected baseline or paq)")]
    UnknownMode(String),
    #[error("parameter layout mismatch at {name}: expected {expected}, found {found}")]
    ParamLayout {
        name: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Graph-bound encoder results for one image.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `M × d` contextualized tokens.
    pub tokens: Var,
    /// `M × C` per-token class logits.
    pub token_scores: Var,
    /// `M × 4` fixed grid anchors in `(cx, cy, w, h)`.
    pub token_anchors: Tensor<T>,
}

/// Decoder inputs: content queries, reference boxes and where they came from.
#[derive(Clone, Debug)]
pub struct QuerySet<T> {
    pub content: Var,
    pub references: Tensor<T>,
    pub selected_indices: Vec<usize>,
    /// Rows of the encoder output picked by top-K (`K × d`).
    pub selected_tokens: Var,
    /// Composition weights (`K × m`), paq mode only.
    pub weights: Option<Var>,
    /// Pattern bank leaf, paq mode only.
    pub patterns: Option<Var>,
}

/// Every intermediate of one forward pass that training and analysis use.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub encoder: EncoderOutput<T>,
    pub queries: QuerySet<T>,
    pub layer_logits: Vec<Var>,
    pub layer_boxes: Vec<Var>,
}

/// Per-layer predictions as plain tensors; index `L − 1` is the final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub per_layer_logits: Vec<Tensor<T>>,
    pub per_layer_boxes: Vec<Tensor<T>>,
    pub selected_indices: Vec<usize>,
    pub references: Tensor<T>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn final_logits(&self) -> &Tensor<T> {
        self.per_layer_logits.last().expect("at least one layer")
    }

    pub fn final_boxes(&self) -> &Tensor<T> {
        self.per_layer_boxes.last().expect("at least one layer")
    }

    pub fn from_trace(g: &Graph<T>, trace: &ForwardTrace<T>) -> Self {
        Self {
            per_layer_logits: trace.layer_logits.iter().map(|&v| g.value(v).clone()).collect(),
            per_layer_boxes: trace.layer_boxes.iter().map(|&v| g.value(v).clone()).collect(),
            selected_indices: trace.queries.selected_indices.clone(),
            references: trace.queries.references.clone(),
        }
    }
}

/// Splits an image into row-major patch tokens, each flattened channel-major.
pub fn patchify<T: Scalar>(image: &Image, patch: usize) -> Result<Tensor<T>, ModelError> {
    let s = image.size();
    if patch == 0 || !s.is_multiple_of(patch) {
        return Err(ModelError::ImageSize { size: s, patch });
    }
    let grid = s / patch;
    let dim = 3 * patch * patch;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for ch in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(T::lit(image.get(ch, r * patch + dy, c * patch + dx)));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid * grid, dim], data)?)
}

/// Anchors at patch centers with a fixed square size.
pub fn grid_anchors<T: Scalar>(grid: usize, size: f64) -> Tensor<T> {
    let mut v = Vec::with_capacity(grid * grid * 4);
    for r in 0..grid {
        for c in 0..grid {
            v.extend_from_slice(&[(c as f64 + 0.5) / grid as f64, (r as f64 + 0.5) / grid as f64, size, size]);
        }
    }
    Tensor::from_f64(&[grid * grid, 4], &v).expect("shape matches")
}

/// Prior probability the class-head bias starts at.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Detector<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Self::init_params(&config);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against the
    /// layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Self::init_params(&config);
        for (name, t) in expected.iter() {
            match params.get(name) {
                None => {
                    return Err(ModelError::ParamLayout {
                        name: name.to_string(),
                        expected: format!("{:?}", t.shape()),
                        found: "missing".into(),
                    })
                }
                Some(p) if p.shape() != t.shape() => {
                    return Err(ModelError::ParamLayout {
                        name: name.to_string(),
                        expected: format!("{:?}", t.shape()),
                        found: format!("{:?}", p.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().iter().find(|n| expected.get(n).is_none()) {
            return Err(ModelError::ParamLayout {
                name: extra.clone(),
                expected: "absent".into(),
                found: "present".into(),
            });
        }
        // Re-order into the canonical layout.
        let mut ordered = ParamStore::new();
        for name in expected.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked").clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    fn init_params(cfg: &ModelConfig) -> ParamStore<T> {
        let mut rng = Rng::new(cfg.seed);
        let mut init = Init { rng: &mut rng };
        let mut s = ParamStore::new();
        let (d, c) = (cfg.d_model, cfg.num_classes);
        let prior_bias = T::lit(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());

        add_linear(&mut s, &mut init, "enc.patch", cfg.patch_dim(), d);
        s.insert("enc.pos", init.normal(&[cfg.num_tokens(), d], 0.02));
        add_attention(&mut s, &mut init, "enc.attn", d);
        add_layer_norm(&mut s, "enc.ln1", d);
        add_ffn(&mut s, &mut init, "enc.ffn", d, cfg.ffn_hidden);
        add_layer_norm(&mut s, "enc.ln2", d);
        add_linear(&mut s, &mut init, "enc.score", d, c);
        s.get_mut("enc.score.b").expect("just added").data_mut().fill(prior_bias);

        add_linear(&mut s, &mut init, "query_pos.fc1", 4, d);
        add_linear(&mut s, &mut init, "query_pos.fc2", d, d);

        for l in 0..cfg.num_layers {
            let p = format!("dec.{l}");
            add_attention(&mut s, &mut init, &format!("{p}.self"), d);
            add_layer_norm(&mut s, &format!("{p}.ln1"), d);
            add_attention(&mut s, &mut init, &format!("{p}.cross"), d);
            add_layer_norm(&mut s, &format!("{p}.ln2"), d);
            add_ffn(&mut s, &mut init, &format!("{p}.ffn"), d, cfg.ffn_hidden);
            add_layer_norm(&mut s, &format!("{p}.ln3"), d);
            add_linear(&mut s, &mut init, &format!("{p}.cls"), d, c);
            s.get_mut(&format!("{p}.cls.b")).expect("just added").data_mut().fill(prior_bias);
            add_linear(&mut s, &mut init, &format!("{p}.box.fc1"), d, d);
            add_linear(&mut s, &mut init, &format!("{p}.box.fc2"), d, d);
            add_linear(&mut s, &mut init, &format!("{p}.box.fc3"), d, 4);
            // Zero last box layer: the first forward pass reproduces the anchors.
            s.get_mut(&format!("{p}.box.fc3.w")).expect("just added").data_mut().fill(T::zero());
        }

        if cfg.mode == QueryMode::Paq {
            s.insert("paq.patterns", init.normal(&[cfg.num_patterns, d], cfg.pattern_init_std));
            add_linear(&mut s, &mut init, "paq.wgen.fc1", d, cfg.wgen_hidden);
            add_linear(&mut s, &mut init, "paq.wgen.fc2", cfg.wgen_hidden, cfg.num_patterns);
        }
        s
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mode(&self) -> QueryMode {
        self.config.mode
    }

    /// Patch embedding, one post-norm transformer layer, and the score head.
    pub fn encode(&self, g: &mut Graph<T>, p: &BoundParams, image: &Image) -> Result<EncoderOutput<T>, ModelError> {
        let cfg = &self.config;
        if image.size() != cfg.image_size {
            return Err(ModelError::ImageMismatch {
                got: image.size(),
                expected: cfg.image_size,
            });
        }
        let patches = g.constant(patchify(image, cfg.patch_size)?);
        let x = linear(g, p, "enc.patch", patches)?;
        let x = g.add(x, p.get("enc.pos"))?;
        let a = attention(g, p, "enc.attn", x, x, x, cfg.num_heads)?;
        let x = g.add(x, a)?;
        let x = layer_norm(g, p, "enc.ln1", x)?;
        let f = mlp2(g, p, "enc.ffn.fc1", "enc.ffn.fc2", x)?;
        let x = g.add(x, f)?;
        let tokens = layer_norm(g, p, "enc.ln2", x)?;
        let token_scores = linear(g, p, "enc.score", tokens)?;
        Ok(EncoderOutput {
            tokens,
            token_scores,
            token_anchors: grid_anchors(cfg.grid(), cfg.anchor_size),
        })
    }

    /// Top-K selection followed by the mode-specific content construction.
    pub fn build_queries(&self, g: &mut Graph<T>, p: &BoundParams, enc: &EncoderOutput<T>) -> Result<QuerySet<T>, ModelError> {
        let k = self.config.num_queries;
        let selected_indices = select_topk(g.value(enc.token_scores), k)?;
        let selected_tokens = g.gather_rows(enc.tokens, &selected_indices)?;
        let mut refs = Vec::with_capacity(k * 4);
        for &i in &selected_indices {
            refs.extend_from_slice(enc.token_anchors.row(i));
        }
        let references = Tensor::new(vec![k, 4], refs)?;
        let (content, weights, patterns) = match self.config.mode {
            QueryMode::Baseline => (selected_tokens, None, None),
            QueryMode::Paq => {
                let weights = generate_weights(g, p, selected_tokens)?;
                let patterns = p.get("paq.patterns");
                let content = compose_queries(g, weights, patterns)?;
                (content, Some(weights), Some(patterns))
            }
        };
        Ok(QuerySet {
            content,
            references,
            selected_indices,
            selected_tokens,
            weights,
            patterns,
        })
    }

    /// Decoder stack: per layer self-attention, cross-attention to the encoder
    /// tokens and an FFN (each with residual and layer norm), then heads.
    /// Boxes are refined by adding deltas in inverse-sigmoid space.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        queries: &QuerySet<T>,
        enc: &EncoderOutput<T>,
    ) -> Result<(Vec<Var>, Vec<Var>), ModelError> {
        let cfg = &self.config;
        let k = cfg.num_queries;
        if g.shape(queries.content) != [k, cfg.d_model] || queries.references.shape() != [k, 4] {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "decode",
                shapes: vec![g.shape(queries.content).to_vec(), queries.references.shape().to_vec()],
            }));
        }
        let eps = 1e-6;
        let ref_logits = queries.references.map(|v| {
            let v = v.as_f64().clamp(eps, 1.0 - eps);
            T::lit((v / (1.0 - v)).ln())
        });
        let initial_refs = g.constant(queries.references.clone());
        let mut box_logits = g.constant(ref_logits);
        let mut refs = initial_refs;
        let mut q = queries.content;
        let mut layer_logits = Vec::with_capacity(cfg.num_layers);
        let mut layer_boxes = Vec::with_capacity(cfg.num_layers);

        for l in 0..cfg.num_layers {
            let pre = format!("dec.{l}");
            let pos_source = if cfg.position_from_refined { refs } else { initial_refs };
            let pos = mlp2(g, p, "query_pos.fc1", "query_pos.fc2", pos_source)?;

            let qk = g.add(q, pos)?;
            let a = attention(g, p, &format!("{pre}.self"), qk, qk, q, cfg.num_heads)?;
            let x = g.add(q, a)?;
            let x = layer_norm(g, p, &format!("{pre}.ln1"), x)?;

            let xq = g.add(x, pos)?;
            let a = attention(g, p, &format!("{pre}.cross"), xq, enc.tokens, enc.tokens, cfg.num_heads)?;
            let x = g.add(x, a)?;
            let x = layer_norm(g, p, &format!("{pre}.ln2"), x)?;

            let f = mlp2(g, p, &format!("{pre}.ffn.fc1"), &format!("{pre}.ffn.fc2"), x)?;
            let x = g.add(x, f)?;
            let x = layer_norm(g, p, &format!("{pre}.ln3"), x)?;

            let logits = linear(g, p, &format!("{pre}.cls"), x)?;
            let h = linear(g, p, &format!("{pre}.box.fc1"), x)?;
            let h = g.relu(h);
            let delta = mlp2(g, p, &format!("{pre}.box.fc2"), &format!("{pre}.box.fc3"), h)?;
            box_logits = g.add(box_logits, delta)?;
            let boxes = g.sigmoid(box_logits);

            layer_logits.push(logits);
            layer_boxes.push(boxes);
            refs = boxes;
            q = x;
        }
        Ok((layer_logits, layer_boxes))
    }

    /// Full forward pass on an existing graph.
    pub fn forward_on(&self, g: &mut Graph<T>, p: &BoundParams, image: &Image) -> Result<ForwardTrace<T>, ModelError> {
        let encoder = self.encode(g, p, image)?;
        let queries = self.build_queries(g, p, &encoder)?;
        let (layer_logits, layer_boxes) = self.decode(g, p, &queries, &encoder)?;
        Ok(ForwardTrace {
            encoder,
            queries,
            layer_logits,
            layer_boxes,
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, image: &Image) -> Result<ModelOutput<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let trace = self.forward_on(&mut g, &p, image)?;
        Ok(ModelOutput::from_trace(&g, &trace))
    }
}
