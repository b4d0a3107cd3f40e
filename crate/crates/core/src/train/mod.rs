//! Deterministic training loop: per step forward, loss, backward, clipping
//! and an AdamW update under a cosine schedule; per epoch validation,
//! activation statistics, a metrics line and a checkpoint.

mod check;
mod objective;
mod optim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{append_metrics, ActivationStats, ActivationTracker, EpochMetrics};
use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::data::Split;
use crate::eval::{evaluate_split, APResult, EvalConfig, SplitEvalError};
use crate::image::Image;
use crate::loss::{LossConfig, LossError};
use crate::matching::{GroundTruthSet, MatchError};
use crate::model::{Detector, ModelConfig, ModelError, QueryMode};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use check::{check_model_gradients, GradientSample, ModelGradReport};
pub use objective::{image_objective, ImageObjective, ObjectiveConfig};
pub use optim::{clip_global_norm, cosine_lr, global_norm, AdamW};

/// File names inside a run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.paqd";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] SplitEvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}{}", match .last_good { Some(p) => format!("; last good checkpoint kept at {}", p.display()), None => String::new() })]
    NonFinite {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },
}

impl From<crate::autodiff::TensorError> for TrainError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Cosine decay from the base rate to zero at the last step.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds both parameter initialization and the per-epoch data order.
    pub seed: u64,
    pub mode: QueryMode,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    /// Weight of the encoder token-score loss; 0 disables it.
    pub encoder_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 2e-4,
            weight_decay: 1e-4,
            seed: 0,
            mode: QueryMode::Paq,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            schedule: LrSchedule::Cosine,
            grad_clip: 0.1,
            encoder_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("encoder_loss_weight", self.encoder_loss_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: LossConfig {
                lambda_l1: self.lambda_l1,
                lambda_giou: self.lambda_giou,
                ..LossConfig::default()
            },
            encoder_loss_weight: self.encoder_loss_weight,
        }
    }

    /// The model configuration actually trained: mode and seed come from here.
    pub fn model_config(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            seed: self.seed,
            ..model.clone()
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Batch-mean objective.
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Model, optimizer and schedule state for step-level training.
pub struct Trainer<T: Scalar> {
    pub detector: Detector<T>,
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    opt: AdamW,
    step: usize,
    total_steps: usize,
    tracker: ActivationTracker,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, total_steps: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let detector = Detector::new(cfg.model_config(model))?;
        Ok(Self::with_detector(detector, cfg, total_steps))
    }

    pub fn with_detector(detector: Detector<T>, cfg: &TrainConfig, total_steps: usize) -> Self {
        let opt = AdamW::new(detector.params().tensors(), cfg.weight_decay);
        let tracker = Self::fresh_tracker(detector.config());
        Self {
            detector,
            cfg: cfg.clone(),
            objective: cfg.objective(),
            opt,
            step: 0,
            total_steps: total_steps.max(1),
            tracker,
        }
    }

    fn fresh_tracker(mc: &ModelConfig) -> ActivationTracker {
        let m = if mc.mode == QueryMode::Paq { mc.num_patterns } else { 0 };
        ActivationTracker::new(mc.num_queries, m, mc.num_classes)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Cosine => cosine_lr(self.cfg.lr, self.step, self.total_steps),
            LrSchedule::Constant => self.cfg.lr,
        }
    }

    /// Mean objective and parameter gradients over `batch`, without updating.
    pub fn batch_gradients(&mut self, batch: &[(&Image, &GroundTruthSet)]) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let n = self.detector.params().len();
        let mut grads: Vec<Vec<f64>> = self.detector.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut loss_sum = 0.0;
        let scale = T::lit(1.0 / batch.len() as f64);
        for &(image, gt) in batch {
            let mut g = Graph::new();
            let p = self.detector.params().bind(&mut g, true);
            let obj = match image_objective(&self.detector, &mut g, &p, image, gt, &self.objective) {
                Ok(obj) => obj,
                // Non-finite predictions surface first as a non-finite matching cost.
                Err(TrainError::Loss(LossError::Match(MatchError::NonFinite { .. }))) => return Ok((f64::NAN, grads)),
                Err(e) => return Err(e),
            };
            let value = g.value(obj.total).data()[0].as_f64();
            loss_sum += value;
            if !value.is_finite() {
                return Ok((f64::NAN, grads));
            }
            let loss = g.scale(obj.total, scale);
            g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()).take(n) {
                if let Some(gv) = g.grad(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b.as_f64());
                }
            }

            let last = obj.decoder.assignments.last().expect("at least one layer");
            self.tracker.record_matches(last);
            self.tracker.record_query_grad(&g.grad_tensor(obj.trace.queries.content).cast());
            if let Some(w) = obj.trace.queries.weights {
                self.tracker.record_weights(&g.value(w).cast(), last, &gt.labels);
            }
        }
        if let Some(pos) = self.detector.params().position("paq.patterns") {
            let shape = self.detector.params().tensors()[pos].shape().to_vec();
            self.tracker.record_pattern_grad(&Tensor::new(shape, grads[pos].clone()).expect("shape matches"));
        }
        Ok((loss_sum / batch.len() as f64, grads))
    }

    /// One optimizer step on `batch`. A non-finite loss or gradient leaves
    /// the parameters untouched and returns `NonFinite`.
    pub fn step(&mut self, batch: &[(&Image, &GroundTruthSet)], epoch: usize) -> Result<StepReport, TrainError> {
        let (loss, mut grads) = self.batch_gradients(batch)?;
        let grad_norm = global_norm(&grads);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step: self.step,
                last_good: None,
            });
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.current_lr();
        self.opt.update(self.detector.params_mut().tensors_mut(), &grads, lr);
        self.step += 1;
        Ok(StepReport { loss, lr, grad_norm })
    }

    /// Statistics gathered since the last call.
    pub fn take_stats(&mut self) -> ActivationStats {
        let stats = self.tracker.finish();
        self.tracker = Self::fresh_tracker(self.detector.config());
        stats
    }
}

/// Everything a finished run produced.
pub struct TrainOutcome<T: Scalar> {
    pub detector: Detector<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Batch-mean loss of every step, in order.
    pub step_losses: Vec<f64>,
}

/// Shuffled training order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, epoch as u64).shuffle(&mut order);
    order
}

fn metrics_line(epoch: usize, mode: QueryMode, loss: f64, lr: f64, stats: ActivationStats, ap: APResult) -> EpochMetrics {
    EpochMetrics {
        epoch,
        mode,
        train_loss: loss,
        lr,
        matched_fraction: stats.matched_fraction,
        gini_query_matches: stats.gini_query_matches,
        gini_query_grads: stats.gini_query_grads,
        gini_pattern_grads: stats.gini_pattern_grads,
        map50: ap.map50,
        map5095: ap.map5095,
        precision: ap.precision,
        recall: ap.recall,
        per_class_ap50: ap.per_class_ap50,
        per_class_ap5095: ap.per_class_ap5095,
        match_counts: stats.match_counts,
        pattern_grad_norms: stats.pattern_grad_norms,
        pattern_class_mass: stats.pattern_class_mass,
    }
}

/// Full training run. With `out_dir`, metrics are appended to
/// `metrics.jsonl` and the checkpoint is rewritten after every epoch.
/// `on_epoch` sees each metrics line as it is produced.
fn check_split_fits(model: &ModelConfig, split: &Split) -> Result<(), TrainError> {
    if let Some(img) = split.images.iter().find(|im| im.size() != model.image_size) {
        return Err(TrainError::Config(format!(
            "{} split has {}x{} images, model expects {}",
            split.name,
            img.size(),
            img.size(),
            model.image_size
        )));
    }
    let max_label = split.annotations.scenes.iter().flat_map(|s| s.labels.iter()).max();
    if let Some(&l) = max_label.filter(|&&l| l >= model.num_classes) {
        return Err(TrainError::Config(format!(
            "{} split has class id {l}, model has {} classes",
            split.name, model.num_classes
        )));
    }
    Ok(())
}

pub fn train<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_split: &Split,
    val_split: &Split,
    eval_cfg: &EvalConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    for split in [train_split, val_split] {
        check_split_fits(model, split)?;
    }
    let steps_per_epoch = cfg.steps_per_epoch(train_split.len());
    let mut trainer = Trainer::<T>::new(model, cfg, cfg.epochs * steps_per_epoch)?;
    let io = |path: &Path, source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let (metrics_path, ckpt_path) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            let m = dir.join(METRICS_FILE);
            if m.exists() {
                std::fs::remove_file(&m).map_err(|e| io(&m, e))?;
            }
            (Some(m), Some(dir.join(CHECKPOINT_FILE)))
        }
        None => (None, None),
    };
    let mut last_good: Option<PathBuf> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let ground_truth: Vec<GroundTruthSet> = (0..train_split.len()).map(|i| train_split.ground_truth(i)).collect();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_split.len());
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Image, &GroundTruthSet)> =
                chunk.iter().map(|&i| (&train_split.images[i], &ground_truth[i])).collect();
            let report = trainer.step(&batch, epoch).map_err(|e| match e {
                TrainError::NonFinite { epoch, step, .. } => TrainError::NonFinite {
                    epoch,
                    step,
                    last_good: last_good.clone(),
                },
                other => other,
            })?;
            loss_sum += report.loss;
            lr = report.lr;
            step_losses.push(report.loss);
        }
        let (ap, _) = evaluate_split(&trainer.detector, val_split, eval_cfg)?;
        let stats = trainer.take_stats();
        let line = metrics_line(epoch, cfg.mode, loss_sum / steps_per_epoch as f64, lr, stats, ap);
        if let Some(path) = &metrics_path {
            append_metrics(path, &line).map_err(|e| io(path, e))?;
        }
        if let Some(path) = &ckpt_path {
            let next = Rng::derived(cfg.seed, epoch as u64 + 1).state();
            save_checkpoint(path, &trainer.detector, epoch, &next)?;
            last_good = Some(path.clone());
        }
        on_epoch(&line);
        metrics.push(line);
    }
    Ok(TrainOutcome {
        detector: trainer.detector,
        metrics,
        step_losses,
    })
}
