use crate::scalar::Scalar;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was reached.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step `eps`.
///
/// `f` receives a fresh graph and the leaf holding `x` each time it is called.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = g.grad_tensor(leaf).to_f64();

    let eval = |probe: Tensor<T>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaf = g.constant(probe);
        let out = f(&mut g, leaf)?;
        let v = g.value(out);
        v.item()
            .map(Scalar::as_f64)
            .ok_or_else(|| TensorError::NonScalarLoss(v.shape().to_vec()))
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let xi = x.data()[i].as_f64();
        plus.data_mut()[i] = T::lit(xi + eps);
        minus.data_mut()[i] = T::lit(xi - eps);
        let h = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / h);
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
