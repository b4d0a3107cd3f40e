//! Parameter registration and forward helpers for the transformer blocks.

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;

use super::params::{BoundParams, Init, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.insert(format!("{prefix}.w"), init.xavier(fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn add_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub(crate) fn add_attention<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(store, init, &format!("{prefix}.{proj}"), d, d);
    }
}

pub(crate) fn add_ffn<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, prefix: &str, d: usize, hidden: usize) {
    add_linear(store, init, &format!("{prefix}.fc1"), d, hidden);
    add_linear(store, init, &format!("{prefix}.fc2"), hidden, d);
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let w = p.get(&format!("{prefix}.w"));
    let b = p.get(&format!("{prefix}.b"));
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let gain = p.get(&format!("{prefix}.g"));
    let bias = p.get(&format!("{prefix}.b"));
    let n = g.layer_norm(x, T::lit(LN_EPS));
    let y = g.mul_row(n, gain)?;
    g.add_row(y, bias)
}

/// Two linear layers with a ReLU between them.
pub(crate) fn mlp2<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    first: &str,
    second: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let h = linear(g, p, first, x)?;
    let h = g.relu(h);
    linear(g, p, second, h)
}

/// Multi-head scaled dot-product attention built from matmul and softmax.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let q = linear(g, p, &format!("{prefix}.q"), query)?;
    let k = linear(g, p, &format!("{prefix}.k"), key)?;
    let v = linear(g, p, &format!("{prefix}.v"), value)?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, p, &format!("{prefix}.o"), merged)
}
