//! Query-activation instrumentation and parameter/FLOP accounting.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::matching::MatchAssignment;
use crate::model::{Detector, ModelConfig, ModelError, QueryMode, QuerySet};
use crate::scalar::Scalar;

/// Gini coefficient of nonnegative values; 0 for an all-zero or empty input.
pub fn gini(values: &[f64]) -> f64 {
    assert!(values.iter().all(|v| *v >= 0.0), "gini needs nonnegative values");
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let weighted: f64 = sorted.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    let g = 2.0 * weighted / (n as f64 * total) - (n as f64 + 1.0) / n as f64;
    g.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// Times each query slot was matched.
    pub match_counts: Vec<u64>,
    /// Cumulative gradient norm per pattern row (empty in baseline mode).
    pub pattern_grad_norms: Vec<f64>,
    /// Cumulative gradient norm per content-query slot.
    pub query_grad_norms: Vec<f64>,
    pub gini_query_matches: f64,
    pub gini_pattern_grads: f64,
    pub gini_query_grads: f64,
    /// Fraction of query slots matched at least once.
    pub matched_fraction: f64,
    /// Mean composition weight on each pattern, per ground-truth class of
    /// the matched query (`classes × patterns`; empty in baseline mode).
    pub pattern_class_mass: Vec<Vec<f64>>,
}

/// Accumulates per-step observations over an epoch.
#[derive(Clone, Debug)]
pub struct ActivationTracker {
    match_counts: Vec<u64>,
    pattern_grad_norms: Vec<f64>,
    query_grad_norms: Vec<f64>,
    class_mass: Vec<Vec<f64>>,
    class_hits: Vec<u64>,
}

impl ActivationTracker {
    pub fn new(num_queries: usize, num_patterns: usize, num_classes: usize) -> Self {
        Self {
            match_counts: vec![0; num_queries],
            pattern_grad_norms: vec![0.0; num_patterns],
            query_grad_norms: vec![0.0; num_queries],
            class_mass: vec![vec![0.0; num_patterns]; num_classes],
            class_hits: vec![0; num_classes],
        }
    }

    pub fn record_matches(&mut self, assignment: &MatchAssignment) {
        for &(q, _) in &assignment.pairs {
            self.match_counts[q] += 1;
        }
    }

    /// Adds the row norms of a `patterns × d` gradient.
    pub fn record_pattern_grad(&mut self, grad: &Tensor<f64>) {
        for (acc, j) in self.pattern_grad_norms.iter_mut().zip(0..grad.rows()) {
            *acc += grad.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }

    /// Adds the row norms of a `queries × d` content gradient.
    pub fn record_query_grad(&mut self, grad: &Tensor<f64>) {
        for (acc, q) in self.query_grad_norms.iter_mut().zip(0..grad.rows()) {
            *acc += grad.row(q).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }

    /// Adds the composition weights of matched queries to their GT class.
    pub fn record_weights(&mut self, weights: &Tensor<f64>, assignment: &MatchAssignment, labels: &[usize]) {
        for &(q, gt) in &assignment.pairs {
            let c = labels[gt];
            self.class_hits[c] += 1;
            for (acc, w) in self.class_mass[c].iter_mut().zip(weights.row(q)) {
                *acc += w;
            }
        }
    }

    pub fn finish(&self) -> ActivationStats {
        let counts: Vec<f64> = self.match_counts.iter().map(|&c| c as f64).collect();
        let k = self.match_counts.len().max(1);
        let has_patterns = !self.pattern_grad_norms.is_empty();
        ActivationStats {
            match_counts: self.match_counts.clone(),
            pattern_grad_norms: self.pattern_grad_norms.clone(),
            query_grad_norms: self.query_grad_norms.clone(),
            gini_query_matches: gini(&counts),
            gini_pattern_grads: gini(&self.pattern_grad_norms),
            gini_query_grads: gini(&self.query_grad_norms),
            matched_fraction: self.match_counts.iter().filter(|&&c| c > 0).count() as f64 / k as f64,
            pattern_class_mass: if has_patterns {
                self.class_mass
                    .iter()
                    .zip(&self.class_hits)
                    .map(|(m, &n)| m.iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect())
                    .collect()
            } else {
                Vec::new()
            },
        }
    }
}

/// Stats from per-step assignments (flattened over images) and per-step
/// pattern gradients.
pub fn record_activation(
    num_queries: usize,
    assignments: &[Vec<MatchAssignment>],
    pattern_grads: &[Tensor<f64>],
) -> ActivationStats {
    let m = pattern_grads.first().map_or(0, Tensor::rows);
    let mut t = ActivationTracker::new(num_queries, m, 0);
    for step in assignments {
        for a in step {
            t.record_matches(a);
        }
    }
    for g in pattern_grads {
        t.record_pattern_grad(g);
    }
    t.finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: usize,
    pub paq_params: usize,
    /// `m·d` pattern bank.
    pub pattern_bank_params: usize,
    /// Weight-generator MLP weights and biases.
    pub wgen_params: usize,
    /// Multiply-accumulates per forward pass.
    pub total_flops: u64,
    pub paq_flops: u64,
}

impl CostReport {
    pub fn paq_flop_fraction(&self) -> f64 {
        if self.total_flops == 0 {
            0.0
        } else {
            self.paq_flops as f64 / self.total_flops as f64
        }
    }
}

/// `m·d + d·h + h + h·m + m`, or 0 in baseline mode.
pub fn paq_params_closed_form(cfg: &ModelConfig) -> usize {
    if cfg.mode == QueryMode::Baseline {
        return 0;
    }
    let (m, d, h) = (cfg.num_patterns, cfg.d_model, cfg.wgen_hidden);
    m * d + d * h + h + h * m + m
}

/// Parameter counts by enumerating every tensor of a freshly built model.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport, ModelError> {
    let det = Detector::<f64>::new(cfg.clone())?;
    let p = det.params();
    let mut report = count_flops(cfg)?;
    report.total_params = p.count();
    report.paq_params = p.count_prefix("paq.");
    report.pattern_bank_params = p.count_prefix("paq.patterns");
    report.wgen_params = p.count_prefix("paq.wgen.");
    Ok(report)
}

/// Matmul multiply-accumulates of one forward pass, attention scores
/// included, elementwise work ignored.
pub fn count_flops(cfg: &ModelConfig) -> Result<CostReport, ModelError> {
    cfg.validate()?;
    let (d, c, f) = (cfg.d_model as u64, cfg.num_classes as u64, cfg.ffn_hidden as u64);
    let (m_tok, k) = (cfg.num_tokens() as u64, cfg.num_queries as u64);
    let encoder = m_tok * cfg.patch_dim() as u64 * d
        + 4 * m_tok * d * d
        + 2 * m_tok * m_tok * d
        + 2 * m_tok * d * f
        + m_tok * d * c;
    let per_layer = (k * 4 * d + k * d * d) // position embedding
        + (4 * k * d * d + 2 * k * k * d) // self-attention
        + (2 * k * d * d + 2 * m_tok * d * d + 2 * k * m_tok * d) // cross-attention
        + 2 * k * d * f
        + k * d * c
        + (2 * k * d * d + k * d * 4);
    let paq = match cfg.mode {
        QueryMode::Baseline => 0,
        QueryMode::Paq => {
            let (m, h) = (cfg.num_patterns as u64, cfg.wgen_hidden as u64);
            k * d * h + k * h * m + k * m * d
        }
    };
    Ok(CostReport {
        total_params: 0,
        paq_params: 0,
        pattern_bank_params: 0,
        wgen_params: 0,
        total_flops: encoder + cfg.num_layers as u64 * per_layer + paq,
        paq_flops: paq,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: QueryMode,
    pub train_loss: f64,
    pub lr: f64,
    pub matched_fraction: f64,
    pub gini_query_matches: f64,
    pub gini_query_grads: f64,
    pub gini_pattern_grads: f64,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_class_ap50: std::collections::BTreeMap<usize, f64>,
    pub per_class_ap5095: std::collections::BTreeMap<usize, f64>,
    pub match_counts: Vec<u64>,
    pub pattern_grad_norms: Vec<f64>,
    pub pattern_class_mass: Vec<Vec<f64>>,
}

pub fn append_metrics(path: &Path, m: &EpochMetrics) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(m).map_err(std::io::Error::other)?;
    writeln!(f, "{line}")
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Checks the composition constraints of one forward pass: every weight
/// row nonnegative and summing to 1 within `tol`, every composed query
/// inside the per-coordinate range of the patterns. `None` when satisfied
/// or when the pass has no composition.
pub fn convexity_violation<T: Scalar>(g: &Graph<T>, q: &QuerySet<T>, tol: f64) -> Option<String> {
    let (w, p) = (q.weights?, q.patterns?);
    let (w, p, c) = (g.value(w), g.value(p), g.value(q.content));
    for r in 0..w.rows() {
        let row = w.row(r);
        if let Some(j) = row.iter().position(|x| x.as_f64() < 0.0) {
            return Some(format!("weight ({r}, {j}) is negative"));
        }
        let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (sum - 1.0).abs() > tol {
            return Some(format!("weight row {r} sums to {sum}"));
        }
    }
    for j in 0..p.cols() {
        let col = (0..p.rows()).map(|i| p.at(i, j).as_f64());
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        let slack = tol * (1.0 + lo.abs().max(hi.abs()));
        for r in 0..c.rows() {
            let v = c.at(r, j).as_f64();
            if v < lo - slack || v > hi + slack {
                return Some(format!("query ({r}, {j}) = {v} outside [{lo}, {hi}]"));
            }
        }
    }
    None
}
