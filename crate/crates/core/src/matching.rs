//! Query-to-ground-truth bipartite matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tensor};
use crate::boxes::{giou, BBox, BoxError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cannot match {gts} ground truths one-to-one with {queries} queries")]
    TooFewQueries { queries: usize, gts: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("ground truth has {boxes} boxes but {labels} labels")]
    LengthMismatch { boxes: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("prediction tensors have shapes {logits:?} and {boxes:?}")]
    PredictionShape { logits: Vec<usize>, boxes: Vec<usize> },
    #[error("ground truth set is empty")]
    EmptyGroundTruth,
    #[error(transparent)]
    Box(#[from] BoxError),
}

/// Boxes and class labels of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl GroundTruthSet {
    pub fn new(boxes: Vec<BBox>, labels: Vec<usize>) -> Self {
        Self { boxes, labels }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), MatchError> {
        if self.boxes.len() != self.labels.len() {
            return Err(MatchError::LengthMismatch {
                boxes: self.boxes.len(),
                labels: self.labels.len(),
            });
        }
        for (index, &label) in self.labels.iter().enumerate() {
            if label >= num_classes {
                return Err(MatchError::Label {
                    index,
                    label,
                    classes: num_classes,
                });
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }
}

/// One-to-one pairing, as `(query, gt)` pairs ordered by gt index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }

    pub fn gts(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, g)| g).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Dense row-major matrix, rows = queries, columns = ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "cost matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn total(&self, assignment: &MatchAssignment) -> f64 {
        assignment.pairs.iter().map(|&(q, g)| self.get(q, g)).sum()
    }
}

/// `cost[q][g] = w_cls·(−σ(logit[q, label_g])) + w_l1·‖box_q − box_g‖₁ + w_giou·(−giou)`.
pub fn build_cost_matrix<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gt: &GroundTruthSet,
    weights: &CostWeights,
) -> Result<CostMatrix, MatchError> {
    if gt.is_empty() {
        return Err(MatchError::EmptyGroundTruth);
    }
    let shape_err = || MatchError::PredictionShape {
        logits: logits.shape().to_vec(),
        boxes: boxes.shape().to_vec(),
    };
    if logits.shape().len() != 2 || boxes.shape().len() != 2 || boxes.cols() != 4 || logits.rows() != boxes.rows() {
        return Err(shape_err());
    }
    gt.validate(logits.cols())?;
    let k = logits.rows();
    let mut data = Vec::with_capacity(k * gt.len());
    for q in 0..k {
        let b = boxes.row(q);
        let pred = BBox::new_unchecked(b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64());
        for (tb, &label) in gt.boxes.iter().zip(&gt.labels) {
            let prob = sigmoid(logits.at(q, label)).as_f64();
            let l1: f64 = pred
                .to_array()
                .iter()
                .zip(tb.to_array())
                .map(|(p, t)| (p - t).abs())
                .sum();
            data.push(-weights.class * prob + weights.l1 * l1 - weights.giou * giou(&pred, tb));
        }
    }
    Ok(CostMatrix::new(k, gt.len(), data))
}

/// Minimum-cost assignment of `n` rows onto `m ≥ n` columns via shortest
/// augmenting paths with dual potentials. Returns the column of every row.
fn solve_rectangular(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j] = 1-based row assigned to column j (0 = free); column 0 is the root.
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of[owner[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Optimal one-to-one matching of every ground truth (column) to a distinct
/// query (row). Among optimal assignments the one whose query list, read in
/// ground-truth order, is lexicographically smallest is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchAssignment, MatchError> {
    let (k, g) = (cost.rows(), cost.cols());
    if k < g {
        return Err(MatchError::TooFewQueries { queries: k, gts: g });
    }
    for row in 0..k {
        for col in 0..g {
            if !cost.get(row, col).is_finite() {
                return Err(MatchError::NonFinite { row, col });
            }
        }
    }
    if g == 0 {
        return Ok(MatchAssignment::default());
    }

    // Solve with ground truths as rows.
    let mut witness = solve_rectangular(g, k, |gt, q| cost.get(q, gt));
    let best: f64 = witness.iter().enumerate().map(|(gt, &q)| cost.get(q, gt)).sum();
    let tol = 1e-9 * (1.0 + best.abs());

    // Canonicalize ties: fix ground truths in order, trying smaller query
    // indices than the current witness and keeping any that stays optimal.
    let mut fixed_cost = 0.0;
    let mut used = vec![false; k];
    for gt in 0..g {
        for q in 0..witness[gt] {
            if used[q] {
                continue;
            }
            let head = fixed_cost + cost.get(q, gt);
            if head > best + tol {
                continue;
            }
            let rest_rows: Vec<usize> = (gt + 1..g).collect();
            let rest_cols: Vec<usize> = (0..k).filter(|&c| !used[c] && c != q).collect();
            let sub = solve_rectangular(rest_rows.len(), rest_cols.len(), |r, c| {
                cost.get(rest_cols[c], rest_rows[r])
            });
            let sub_cost: f64 = sub
                .iter()
                .enumerate()
                .map(|(r, &c)| cost.get(rest_cols[c], rest_rows[r]))
                .sum();
            if head + sub_cost <= best + tol {
                witness[gt] = q;
                for (r, &c) in sub.iter().enumerate() {
                    witness[rest_rows[r]] = rest_cols[c];
                }
                break;
            }
        }
        used[witness[gt]] = true;
        fixed_cost += cost.get(witness[gt], gt);
    }

    Ok(MatchAssignment {
        pairs: witness.iter().enumerate().map(|(gt, &q)| (q, gt)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_optimum() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(c.total(&a), 2.0);
    }

    #[test]
    fn anti_diagonal_optimum() {
        let c = CostMatrix::from_rows(&[vec![10.0, 1.0], vec![1.0, 10.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(c.total(&a), 2.0);
    }

    #[test]
    fn too_few_queries_rejected() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(
            hungarian(&c),
            Err(MatchError::TooFewQueries { queries: 1, gts: 2 })
        );
    }

    #[test]
    fn non_finite_rejected() {
        let c = CostMatrix::from_rows(&[vec![1.0], vec![f64::NAN]]);
        assert_eq!(hungarian(&c), Err(MatchError::NonFinite { row: 1, col: 0 }));
    }

    #[test]
    fn all_ties_pick_smallest_queries() {
        let c = CostMatrix::new(5, 3, vec![1.0; 15]);
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn empty_ground_truth_gives_empty_assignment() {
        let c = CostMatrix::new(4, 0, vec![]);
        assert!(hungarian(&c).unwrap().is_empty());
    }

    #[test]
    fn perfect_prediction_cost() {
        let logits = Tensor::<f64>::from_f64(&[1, 2], &[800.0, -800.0]).unwrap();
        let boxes = Tensor::<f64>::from_f64(&[1, 4], &[0.5, 0.5, 0.2, 0.2]).unwrap();
        let gt = GroundTruthSet::new(vec![BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()], vec![0]);
        let c = build_cost_matrix(&logits, &boxes, &gt, &CostWeights::default()).unwrap();
        assert_eq!(c.get(0, 0), -4.0);
    }

    #[test]
    fn class_term_tracks_probability() {
        // σ(ln(1/5)) = 1/6, the uniform six-class probability.
        let logit = (0.2f64).ln();
        let logits = Tensor::<f64>::full(&[3, 6], logit);
        let boxes = Tensor::<f64>::from_f64(&[3, 4], &[0.5, 0.5, 0.2, 0.2].repeat(3)).unwrap();
        let gt = GroundTruthSet::new(
            vec![BBox::new(0.5, 0.5, 0.2, 0.2).unwrap(), BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()],
            vec![1, 4],
        );
        let w = CostWeights {
            class: 1.0,
            l1: 0.0,
            giou: 0.0,
        };
        let c = build_cost_matrix(&logits, &boxes, &gt, &w).unwrap();
        assert_eq!((c.rows(), c.cols()), (3, 2));
        for q in 0..3 {
            for g in 0..2 {
                assert!((c.get(q, g) + 1.0 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cost_matrix_rejects_bad_label() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let boxes = Tensor::<f64>::full(&[2, 4], 0.3);
        let gt = GroundTruthSet::new(vec![BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()], vec![3]);
        assert!(matches!(
            build_cost_matrix(&logits, &boxes, &gt, &CostWeights::default()),
            Err(MatchError::Label { label: 3, .. })
        ));
    }
}
