//! Whole-model gradient check against central finite differences.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::boxes::BBox;
use crate::image::Image;
use crate::matching::{GroundTruthSet, MatchAssignment};
use crate::model::{Detector, ModelConfig};
use crate::rng::Rng;

use super::{image_objective, ObjectiveConfig, TrainError};

/// Gradient magnitudes below this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradientSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradReport {
    pub samples: Vec<GradientSample>,
    pub max_rel_error: f64,
    /// False when a probe changed a matching or the top-K selection, which
    /// makes the finite difference meaningless.
    pub stable: bool,
}

#[derive(PartialEq)]
struct Discrete {
    selected: Vec<usize>,
    assignments: Vec<MatchAssignment>,
}

fn evaluate(det: &Detector<f64>, image: &Image, gt: &GroundTruthSet, cfg: &ObjectiveConfig) -> Result<(f64, Discrete), TrainError> {
    let mut g = Graph::new();
    let p = det.params().bind(&mut g, false);
    let obj = image_objective(det, &mut g, &p, image, gt, cfg)?;
    let mut assignments = obj.decoder.assignments;
    assignments.push(obj.encoder_assignment);
    Ok((
        g.value(obj.total).data()[0],
        Discrete {
            selected: obj.trace.queries.selected_indices,
            assignments,
        },
    ))
}

/// Random image and two ground-truth boxes for the check.
fn probe_input(cfg: &ModelConfig, seed: u64) -> (Image, GroundTruthSet) {
    let mut rng = Rng::derived(seed, 0x9c);
    let s = cfg.image_size;
    let data = (0..3 * s * s).map(|_| rng.uniform()).collect();
    let image = Image::new(s, data).expect("sized");
    let boxes = (0..2)
        .map(|_| {
            let (w, h) = (rng.range(0.15, 0.4), rng.range(0.15, 0.4));
            BBox::new(rng.range(w / 2.0, 1.0 - w / 2.0), rng.range(h / 2.0, 1.0 - h / 2.0), w, h).expect("valid")
        })
        .collect();
    let labels = (0..2).map(|_| rng.below(cfg.num_classes)).collect();
    (image, GroundTruthSet::new(boxes, labels))
}

/// Compares analytic and central-difference gradients of the full training
/// objective for `samples` parameter entries. Pattern and weight-generator
/// tensors (when present) and the score head are always sampled.
/// `corrupt` perturbs one analytic value, for exercising the failure path.
pub fn check_model_gradients(
    config: &ModelConfig,
    samples: usize,
    eps: f64,
    seed: u64,
    corrupt: bool,
) -> Result<ModelGradReport, TrainError> {
    let det = Detector::<f64>::new(config.clone())?;
    let (image, gt) = probe_input(config, seed);
    let obj_cfg = ObjectiveConfig::default();

    let mut g = Graph::new();
    let p = det.params().bind(&mut g, true);
    let obj = image_objective(&det, &mut g, &p, &image, &gt, &obj_cfg)?;
    g.backward(obj.total)?;
    let analytic: Vec<Vec<f64>> = p.vars().iter().map(|&v| g.grad_tensor(v).into_data()).collect();
    let (_, base) = evaluate(&det, &image, &gt, &obj_cfg)?;

    let names = det.params().names();
    let mut rng = Rng::derived(seed, 0x9d);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for forced in ["paq.patterns", "paq.wgen.fc1.w", "paq.wgen.fc2.w", "enc.score.w"] {
        if let Some(t) = det.params().position(forced) {
            picks.push((t, rng.below(det.params().tensors()[t].numel())));
        }
    }
    while picks.len() < samples {
        let t = rng.below(names.len());
        let pick = (t, rng.below(det.params().tensors()[t].numel()));
        if !picks.contains(&pick) {
            picks.push(pick);
        }
    }
    picks.truncate(samples.max(1));

    let mut stable = true;
    let mut out = Vec::with_capacity(picks.len());
    for (n, &(t, i)) in picks.iter().enumerate() {
        let mut probe = |delta: f64| -> Result<f64, TrainError> {
            let mut d = det.clone();
            d.params_mut().tensors_mut()[t].data_mut()[i] += delta;
            let (v, disc) = evaluate(&d, &image, &gt, &obj_cfg)?;
            stable &= disc == base;
            Ok(v)
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        let mut a = analytic[t][i];
        if corrupt && n == 0 {
            a += 1e-2 * a.abs().max(1.0);
        }
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.push(GradientSample {
            name: names[t].clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = out.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(ModelGradReport {
        samples: out,
        max_rel_error,
        stable,
    })
}
