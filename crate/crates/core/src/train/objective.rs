use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::image::Image;
use crate::loss::{classification_loss, match_layer, total_loss, LossConfig, LossOutput};
use crate::matching::{GroundTruthSet, MatchAssignment};
use crate::model::{BoundParams, Detector, ForwardTrace};
use crate::scalar::Scalar;

use super::TrainError;

/// Decoder set loss plus an optional focal loss on the encoder token scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub loss: LossConfig,
    /// Weight of the encoder selection loss; 0 disables it.
    pub encoder_loss_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            encoder_loss_weight: 1.0,
        }
    }
}

pub struct ImageObjective<T> {
    pub total: Var,
    pub decoder: LossOutput,
    pub encoder_loss: f64,
    pub encoder_assignment: MatchAssignment,
    pub trace: ForwardTrace<T>,
}

/// Forward pass on one image and its training loss.
///
/// The top-K token selection is a discrete choice, so the score head only
/// learns through the encoder term: each ground truth is matched to one
/// token (class probability against the fixed token anchors) and the token
/// scores get a focal loss against that assignment.
pub fn image_objective<T: Scalar>(
    det: &Detector<T>,
    g: &mut Graph<T>,
    p: &BoundParams,
    image: &Image,
    gt: &GroundTruthSet,
    cfg: &ObjectiveConfig,
) -> Result<ImageObjective<T>, TrainError> {
    let trace = det.forward_on(g, p, image)?;
    let decoder = total_loss(g, &trace.layer_logits, &trace.layer_boxes, gt, &cfg.loss)?;
    let mut total = decoder.total;
    let mut encoder_loss = 0.0;
    let mut encoder_assignment = MatchAssignment::default();
    if cfg.encoder_loss_weight > 0.0 {
        let scores = trace.encoder.token_scores;
        encoder_assignment = match_layer(g.value(scores), &trace.encoder.token_anchors, gt, &cfg.loss.cost)?;
        let enc = classification_loss(
            g,
            scores,
            &encoder_assignment,
            gt,
            cfg.loss.focal_alpha,
            cfg.loss.focal_gamma,
        )?;
        encoder_loss = g.value(enc).data()[0].as_f64();
        let enc = g.scale(enc, T::lit(cfg.encoder_loss_weight));
        total = g.add(total, enc)?;
    }
    Ok(ImageObjective {
        total,
        decoder,
        encoder_loss,
        encoder_assignment,
        trace,
    })
}
