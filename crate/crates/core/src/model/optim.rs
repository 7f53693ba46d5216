//! AdamW with bias correction and decoupled weight decay.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 5e-5, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// One AdamW update of `params` in place. `step` is the 1-based index of
/// this update. With `decay`, parameters are first shrunk by
/// `1 - lr * weight_decay`.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hyper: &AdamW,
    decay: bool,
) {
    assert!(step >= 1, "steps are counted from 1");
    assert!(params.len() == grads.len() && m.len() == params.len() && v.len() == params.len(), "shape mismatch");
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let bc1 = T::lit(1.0 - hyper.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - hyper.beta2.powi(step as i32));
    let lr = T::lit(hyper.lr);
    let eps = T::lit(hyper.eps);
    let shrink = T::lit(1.0 - if decay { hyper.lr * hyper.weight_decay } else { 0.0 });
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] = params[i] * shrink - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub hyper: AdamW,
}

impl<T: Real> OptimState<T> {
    pub fn new(len: usize, hyper: AdamW) -> OptimState<T> {
        OptimState { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0, hyper }
    }

    /// Applies one step; `groups` lists parameter ranges and whether each
    /// is weight-decayed. Ranges not listed are left untouched.
    pub fn update(&mut self, params: &mut [T], grads: &[T], groups: &[(Range<usize>, bool)]) {
        self.step += 1;
        for (r, decay) in groups {
            adamw_step(
                &mut params[r.clone()],
                &grads[r.clone()],
                &mut self.m[r.clone()],
                &mut self.v[r.clone()],
                self.step,
                &self.hyper,
                *decay,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = [0.3f64, -1.2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let hyper = AdamW { weight_decay: 0.0, lr: 0.1, ..AdamW::default() };
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &hyper, true);
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1 g, v = 0.05 g^2; corrected: mhat = g, vhat = g^2.
        let g = 0.25f64;
        let hyper = AdamW { lr: 1e-3, weight_decay: 0.0, ..AdamW::default() };
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(&mut p, &[g], &mut m, &mut v, 1, &hyper, false);
        let want = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);
    }

    #[test]
    fn decay_scales_parameters() {
        let hyper = AdamW { lr: 0.01, weight_decay: 0.5, ..AdamW::default() };
        let mut p = [2.0f64, -4.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &hyper, true);
        assert_eq!(p, [2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);
    }
}
