//! COCO-style detection metrics: per-class AP at IoU 0.5 and averaged over
//! 0.50:0.05:0.95 with 101-point interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, BoxError};
use crate::data::SceneAnnotation;
use crate::model::ModelOutput;
use crate::scalar::Scalar;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Score threshold at which precision and recall are reported.
pub const OPERATING_SCORE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ground-truth instances to evaluate against")]
    NoGroundTruth,
    #[error("detection {index} refers to unknown image {image_id}")]
    UnknownImage { index: usize, image_id: u64 },
    #[error("detection {index}: {msg}")]
    InvalidDetection { index: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    pub fn validate(&self) -> Result<(), String> {
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        self.bbox.validate().map_err(|e: BoxError| e.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    /// Only classes with at least one ground-truth instance appear.
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub per_class_ap5095: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Final-layer detections for one image: per query the argmax-class sigmoid
/// score, filtered, sorted by descending score and truncated. No NMS.
pub fn extract_detections<T: Scalar>(
    output: &ModelOutput<T>,
    image_id: u64,
    score_threshold: f64,
    max_det: usize,
) -> Vec<Detection> {
    let logits = output.final_logits();
    let boxes = output.final_boxes();
    let mut dets = Vec::new();
    for q in 0..logits.rows() {
        let (class_id, best) = logits
            .row(q)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| {
                let v = v.as_f64();
                if v > acc.1 { (c, v) } else { acc }
            });
        let score = 1.0 / (1.0 + (-best).exp());
        if score.is_nan() || score < score_threshold {
            continue;
        }
        let b = boxes.row(q);
        // Sigmoid outputs can round to exactly 0 in low precision.
        let Ok(bbox) = BBox::new(b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()) else {
            continue;
        };
        dets.push(Detection {
            image_id,
            class_id,
            score,
            bbox,
        });
    }
    sort_by_score(&mut dets);
    dets.truncate(max_det);
    dets
}

/// Stable descending sort: equal scores keep their input order.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
}

fn index_images(gts: &[SceneAnnotation]) -> HashMap<u64, usize> {
    gts.iter().enumerate().map(|(i, s)| (s.image_id, i)).collect()
}

/// Hit/miss flag for each detection of `class_id` (in descending score
/// order), plus the class's ground-truth count. Each detection takes the
/// unmatched ground truth with the highest IoU; ties go to the lower index.
fn match_class(
    dets: &[Detection],
    gts: &[SceneAnnotation],
    images: &HashMap<u64, usize>,
    class_id: usize,
    threshold: f64,
) -> Result<(Vec<(f64, bool)>, usize), EvalError> {
    let mut ordered: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.class_id == class_id).collect();
    ordered.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(std::cmp::Ordering::Equal));
    let n_gt = gts
        .iter()
        .map(|s| s.labels.iter().filter(|&&l| l == class_id).count())
        .sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|s| vec![false; s.boxes.len()]).collect();
    let mut flags = Vec::with_capacity(ordered.len());
    for (index, d) in ordered {
        let &img = images.get(&d.image_id).ok_or(EvalError::UnknownImage {
            index,
            image_id: d.image_id,
        })?;
        let scene = &gts[img];
        let mut best: Option<(usize, f64)> = None;
        for (j, (b, &l)) in scene.boxes.iter().zip(&scene.labels).enumerate() {
            if l != class_id || used[img][j] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[img][j] = true;
        }
        flags.push((d.score, best.is_some()));
    }
    Ok((flags, n_gt))
}

/// 101-point interpolated area under the precision/recall curve traced by
/// `hits` in rank order.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope: running maximum from the right.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        while k < points.len() && points[k].0 < r {
            k += 1;
        }
        if k < points.len() {
            sum += points[k].1;
        }
    }
    sum / 101.0
}

/// AP of one class, or `None` when the class has no ground truth.
pub fn compute_ap(
    dets: &[Detection],
    gts: &[SceneAnnotation],
    class_id: usize,
    iou_threshold: f64,
) -> Result<Option<f64>, EvalError> {
    let images = index_images(gts);
    let (flags, n_gt) = match_class(dets, gts, &images, class_id, iou_threshold)?;
    if n_gt == 0 {
        return Ok(None);
    }
    let hits: Vec<bool> = flags.iter().map(|f| f.1).collect();
    Ok(Some(interpolated_ap(&hits, n_gt)))
}

pub fn compute_map(dets: &[Detection], gts: &[SceneAnnotation]) -> Result<APResult, EvalError> {
    for (index, d) in dets.iter().enumerate() {
        d.validate().map_err(|msg| EvalError::InvalidDetection { index, msg })?;
    }
    let total_gt: usize = gts.iter().map(|s| s.labels.len()).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let images = index_images(gts);
    let mut classes: Vec<usize> = gts.iter().flat_map(|s| s.labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();

    let thresholds = coco_thresholds();
    let mut out = APResult::default();
    let mut tp_at_op = 0usize;
    for &c in &classes {
        let mut aps = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let (flags, n_gt) = match_class(dets, gts, &images, c, t)?;
            let hits: Vec<bool> = flags.iter().map(|f| f.1).collect();
            aps.push(interpolated_ap(&hits, n_gt));
            if ti == 0 {
                tp_at_op += flags.iter().filter(|(s, h)| *h && *s >= OPERATING_SCORE).count();
            }
        }
        out.per_class_ap50.insert(c, aps[0]);
        out.per_class_ap5095.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    // Detections of classes without ground truth are false positives too.
    for (index, d) in dets.iter().enumerate() {
        if !images.contains_key(&d.image_id) {
            return Err(EvalError::UnknownImage {
                index,
                image_id: d.image_id,
            });
        }
    }
    let n_classes = classes.len() as f64;
    out.map50 = out.per_class_ap50.values().sum::<f64>() / n_classes;
    out.map5095 = out.per_class_ap5095.values().sum::<f64>() / n_classes;
    let kept = dets.iter().filter(|d| d.score >= OPERATING_SCORE).count();
    out.precision = if kept == 0 { 0.0 } else { tp_at_op as f64 / kept as f64 };
    out.recall = tp_at_op as f64 / total_gt as f64;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    image_id: u64,
    class_id: usize,
    score: f64,
    bbox: [f64; 4],
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let raw: Vec<RawDetection> = dets
        .iter()
        .map(|d| RawDetection {
            image_id: d.image_id,
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox.to_array(),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("detections serialize")
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>, EvalError> {
    let raw: Vec<RawDetection> = serde_json::from_str(text).map_err(|e| EvalError::InvalidDetection {
        index: 0,
        msg: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(index, r)| {
            let bbox = BBox::from_array(r.bbox).map_err(|e| EvalError::InvalidDetection {
                index,
                msg: e.to_string(),
            })?;
            let d = Detection {
                image_id: r.image_id,
                class_id: r.class_id,
                score: r.score,
                bbox,
            };
            d.validate().map_err(|msg| EvalError::InvalidDetection { index, msg })?;
            Ok(d)
        })
        .collect()
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<(), EvalError> {
    fs::write(path, detections_to_json(dets)).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    detections_from_json(&text)
}

/// Detection extraction settings used when scoring a model on a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub max_det: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.001,
            max_det: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(format!("score_threshold {} outside [0, 1]", self.score_threshold));
        }
        if self.max_det == 0 {
            return Err("max_det must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SplitEvalError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Runs the detector on every image of `split` and scores the detections.
pub fn evaluate_split<T: Scalar>(
    det: &crate::model::Detector<T>,
    split: &crate::data::Split,
    cfg: &EvalConfig,
) -> Result<(APResult, Vec<Detection>), SplitEvalError> {
    let mut dets = Vec::new();
    for (img, scene) in split.images.iter().zip(&split.annotations.scenes) {
        let out = det.forward(img)?;
        dets.extend(extract_detections(&out, scene.image_id, cfg.score_threshold, cfg.max_det));
    }
    let result = compute_map(&dets, &split.annotations.scenes)?;
    Ok((result, dets))
}
