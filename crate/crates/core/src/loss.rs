//! Set-prediction training objective: sigmoid focal classification plus L1 and
//! GIoU box terms on Hungarian-matched pairs, summed over decoder layers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::matching::{build_cost_matrix, hungarian, CostWeights, GroundTruthSet, MatchAssignment, MatchError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("{logits} logit tensors but {boxes} box tensors")]
    LayerCount { logits: usize, boxes: usize },
    #[error("assignment pair ({query}, {gt}) out of range for {queries} queries and {gts} ground truths")]
    Assignment {
        query: usize,
        gt: usize,
        queries: usize,
        gts: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the L1 box term.
    pub lambda_l1: f64,
    /// Weight of the GIoU box term.
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cost: CostWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cost: CostWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub per_layer: Vec<LayerLoss>,
}

/// Differentiable loss plus the bookkeeping produced while computing it.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Assignment used at each decoder layer.
    pub assignments: Vec<MatchAssignment>,
}

fn check_assignment(assignment: &MatchAssignment, queries: usize, gts: usize) -> Result<(), LossError> {
    for &(query, gt) in &assignment.pairs {
        if query >= queries || gt >= gts {
            return Err(LossError::Assignment {
                query,
                gt,
                queries,
                gts,
            });
        }
    }
    Ok(())
}

/// Sigmoid focal loss over all `(query, class)` pairs. Matched queries target
/// their ground-truth class; every other target is 0. Normalized by `max(1, G)`.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    assignment: &MatchAssignment,
    gt: &GroundTruthSet,
    alpha: f64,
    gamma: f64,
) -> Result<Var, LossError> {
    let shape = g.shape(logits).to_vec();
    let (k, c) = (shape[0], shape[1]);
    check_assignment(assignment, k, gt.len())?;
    let mut target = Tensor::<T>::zeros(&[k, c]);
    for &(q, gi) in &assignment.pairs {
        target.data_mut()[q * c + gt.labels[gi]] = T::one();
    }
    let not_target = target.map(|t| T::one() - t);
    let target = g.constant(target);
    let not_target = g.constant(not_target);

    let neg_logits = g.neg(logits);
    let p = g.sigmoid(logits);
    let one_minus_p = g.sigmoid(neg_logits);
    let log_p = g.log_sigmoid(logits);
    let log_one_minus_p = g.log_sigmoid(neg_logits);

    let gamma = T::lit(gamma);
    let pos_mod = g.pow(one_minus_p, gamma);
    let pos = g.mul(pos_mod, log_p)?;
    let pos = g.scale(pos, T::lit(-alpha));
    let neg_mod = g.pow(p, gamma);
    let neg = g.mul(neg_mod, log_one_minus_p)?;
    let neg = g.scale(neg, T::lit(-(1.0 - alpha)));

    let pos = g.mul(target, pos)?;
    let neg = g.mul(not_target, neg)?;
    let all = g.add(pos, neg)?;
    let total = g.sum(all);
    let norm = gt.len().max(1) as f64;
    Ok(g.scale(total, T::lit(1.0 / norm)))
}

/// Mean L1 distance and mean `1 − GIoU` over matched pairs; both zero when
/// there are no ground truths.
pub fn box_losses<T: Scalar>(
    g: &mut Graph<T>,
    boxes: Var,
    assignment: &MatchAssignment,
    gt: &GroundTruthSet,
) -> Result<(Var, Var), LossError> {
    let k = g.shape(boxes)[0];
    check_assignment(assignment, k, gt.len())?;
    if assignment.is_empty() {
        let zero = Tensor::scalar(T::zero());
        return Ok((g.constant(zero.clone()), g.constant(zero)));
    }
    let n = assignment.len();
    let pred = g.gather_rows(boxes, &assignment.queries())?;
    let target: Vec<f64> = assignment
        .gts()
        .iter()
        .flat_map(|&gi| gt.boxes[gi].to_array())
        .collect();
    let target = g.constant(Tensor::from_f64(&[n, 4], &target)?);
    let inv_n = T::lit(1.0 / n as f64);

    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let l1 = g.sum(abs);
    let l1 = g.scale(l1, inv_n);

    let giou = giou_rows(g, pred, target)?;
    let giou_sum = g.sum(giou);
    let mean = g.scale(giou_sum, -inv_n);
    let giou_loss = g.add_scalar(mean, T::one());
    Ok((l1, giou_loss))
}

/// Row-wise GIoU between two `n × 4` center-format box tensors, as `n × 1`.
pub fn giou_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, LossError> {
    // (cx, cy, w, h) -> (x1, y1, x2, y2) as a right multiplication.
    let to_corners = Tensor::from_f64(
        &[4, 4],
        &[
            1.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 1.0, //
            -0.5, 0.0, 0.5, 0.0, //
            0.0, -0.5, 0.0, 0.5,
        ],
    )?;
    let m = g.constant(to_corners);
    let ca = g.matmul(a, m)?;
    let cb = g.matmul(b, m)?;
    let col = |g: &mut Graph<T>, v: Var, j: usize| g.gather_cols(v, &[j]);

    let (ax1, ay1, ax2, ay2) = (col(g, ca, 0)?, col(g, ca, 1)?, col(g, ca, 2)?, col(g, ca, 3)?);
    let (bx1, by1, bx2, by2) = (col(g, cb, 0)?, col(g, cb, 1)?, col(g, cb, 2)?, col(g, cb, 3)?);

    let ix1 = g.maximum(ax1, bx1)?;
    let iy1 = g.maximum(ay1, by1)?;
    let ix2 = g.minimum(ax2, bx2)?;
    let iy2 = g.minimum(ay2, by2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let (aw, ah) = (col(g, a, 2)?, col(g, a, 3)?);
    let (bw, bh) = (col(g, b, 2)?, col(g, b, 3)?);
    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let areas = g.add(area_a, area_b)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(ax1, bx1)?;
    let ey1 = g.minimum(ay1, by1)?;
    let ex2 = g.maximum(ax2, bx2)?;
    let ey2 = g.maximum(ay2, by2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclose = g.mul(ew, eh)?;
    let gap = g.sub(enclose, union)?;
    let gap = g.div(gap, enclose)?;
    Ok(g.sub(iou, gap)?)
}

/// Hungarian assignment of one layer's predictions, treated as a constant.
pub fn match_layer<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gt: &GroundTruthSet,
    weights: &CostWeights,
) -> Result<MatchAssignment, LossError> {
    if gt.is_empty() {
        return Ok(MatchAssignment::default());
    }
    let cost = build_cost_matrix(logits, boxes, gt, weights)?;
    Ok(hungarian(&cost)?)
}

/// Sum over decoder layers of `cls + λ1·l1 + λ2·giou`, matching each layer
/// independently.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    layer_logits: &[Var],
    layer_boxes: &[Var],
    gt: &GroundTruthSet,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    if layer_logits.len() != layer_boxes.len() || layer_logits.is_empty() {
        return Err(LossError::LayerCount {
            logits: layer_logits.len(),
            boxes: layer_boxes.len(),
        });
    }
    let mut terms = Vec::with_capacity(layer_logits.len());
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(layer_logits.len());
    for (&logits, &boxes) in layer_logits.iter().zip(layer_boxes) {
        let assignment = match_layer(g.value(logits), g.value(boxes), gt, &cfg.cost)?;
        let cls = classification_loss(g, logits, &assignment, gt, cfg.focal_alpha, cfg.focal_gamma)?;
        let (l1, giou) = box_losses(g, boxes, &assignment, gt)?;
        let layer = LayerLoss {
            cls: g.value(cls).data()[0].as_f64(),
            l1: g.value(l1).data()[0].as_f64(),
            giou: g.value(giou).data()[0].as_f64(),
        };
        let l1w = g.scale(l1, T::lit(cfg.lambda_l1));
        let giouw = g.scale(giou, T::lit(cfg.lambda_giou));
        let sum = g.add(cls, l1w)?;
        let sum = g.add(sum, giouw)?;
        terms.push(sum);

        breakdown.cls += layer.cls;
        breakdown.l1 += layer.l1;
        breakdown.giou += layer.giou;
        breakdown.per_layer.push(layer);
        assignments.push(assignment);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    breakdown.total = g.value(total).data()[0].as_f64();
    Ok(LossOutput {
        total,
        breakdown,
        assignments,
    })
}
