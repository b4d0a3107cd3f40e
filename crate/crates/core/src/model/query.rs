//! Decoder query construction: confidence-ranked token selection and
//! pattern-composed content queries.

use crate::autodiff::{Graph, Tensor, Var};
use crate::scalar::Scalar;

use super::layers::mlp2;
use super::params::BoundParams;
use super::ModelError;

/// Indices of the `k` tokens with the largest max-over-classes score, ordered
/// by descending score; equal scores keep the lower index first.
pub fn select_topk<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<Vec<usize>, ModelError> {
    let m = scores.rows();
    if k > m {
        return Err(ModelError::TopK { k, tokens: m });
    }
    let best: Vec<T> = (0..m)
        .map(|i| scores.row(i).iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort: ties stay in index order.
    order.sort_by(|&a, &b| best[b].partial_cmp(&best[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    Ok(order)
}

/// Per-query convex combination weights: `softmax(MLP(selected_tokens))`,
/// one row of length `m` per query.
pub fn generate_weights<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, selected_tokens: Var) -> Result<Var, ModelError> {
    let logits = mlp2(g, p, "paq.wgen.fc1", "paq.wgen.fc2", selected_tokens)?;
    Ok(g.softmax_rows(logits))
}

/// Content queries as `weights · patterns`.
pub fn compose_queries<T: Scalar>(g: &mut Graph<T>, weights: Var, patterns: Var) -> Result<Var, ModelError> {
    let m = g.shape(patterns)[0];
    let cols = g.shape(weights).get(1).copied().unwrap_or(0);
    if cols != m {
        return Err(ModelError::WeightColumns { got: cols, patterns: m });
    }
    Ok(g.matmul(weights, patterns)?)
}
