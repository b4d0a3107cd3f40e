//! AdamW with decoupled weight decay, cosine learning-rate schedule and
//! global-norm gradient clipping.

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// `base · ½(1 + cos(π · step / (total − 1)))`: `base` at step 0, zero at the
/// last step.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &[Tensor<T>], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Moments are kept in f64.
    pub fn update<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let xf = x.as_f64();
                let next = xf - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * xf);
                *x = T::lit(next);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        assert!(cosine_lr(2e-4, 99, 100) <= 1e-8 * 2e-4);
        assert!((cosine_lr(1.0, 50, 101) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0.3, 0, 1), 0.3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut g, 0.1);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 0.1 + 1e-9);
        let mut small = vec![vec![0.01]];
        clip_global_norm(&mut small, 0.1);
        assert_eq!(small[0][0], 0.01);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &[vec![0.3, -0.7]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &[vec![2.0, -0.5]], 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6);
    }
}
