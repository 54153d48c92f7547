//! Adam with a cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::autograd::Tensor;
use crate::error::{shape_err, Result};
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update of `params` with `grads` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "optimizer holds {} moments for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(BETA1, t as f64);
        let c2 = 1.0 - libm::pow(BETA2, t as f64);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (one, eps) = (T::one(), T::lit(ADAM_EPS));
        let step = T::lit(lr / c1);
        let c2 = T::lit(c2);
        for i in 0..params.len() {
            let (p, g) = (params[i].data_mut(), grads[i].data());
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `max_lr` at step 0 to `min_lr` at `total` steps.
pub fn cosine_lr(max_lr: f64, min_lr: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + libm::cos(core::f64::consts::PI * frac))
}
