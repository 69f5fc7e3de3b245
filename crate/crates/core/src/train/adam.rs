//! Adam with bias correction and coupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Optimizer state: one first and second moment per parameter, in
/// parameter registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update from the accumulated gradients, which are then zeroed.
    ///
    /// `g ← ∇ + λθ; m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²;
    /// θ ← θ − α·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.is_empty() || !params.has_grads() {
            return Err(Error::MissingGradients);
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!("optimizer tracks {} parameters, store has {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2, eps, wd) = (f(c.beta1), f(c.beta2), f(c.eps), f(c.weight_decay));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = f(c.lr);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            m.expect_same_shape(&p.value, "adam_step")?;
            let theta = p.value.data_mut();
            for (((th, &gr), mi), vi) in theta.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = gr + wd * *th;
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
