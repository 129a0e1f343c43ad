//! Adam optimizer.

use crate::nn::params::ParameterSet;
use crate::nn::tensor::Tensor;

/// Adam with bias correction. State is allocated lazily from the first
/// stepped parameter set, so a fresh optimizer per training run keeps runs
/// independent and reproducible.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet) {
        if self.m.is_empty() {
            for idx in 0..params.len() {
                self.m.push(Tensor::zeros(params.value(idx).shape()));
                self.v.push(Tensor::zeros(params.value(idx).shape()));
            }
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let grad = params.grad(idx).clone();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let value = params.value_mut(idx).data_mut();
            for i in 0..value.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
