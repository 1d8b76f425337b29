//! Adam with decoupled weight decay.

use ndiff::Tensor;

use crate::config::TrainConfig;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl From<&TrainConfig> for AdamW {
    fn from(t: &TrainConfig) -> Self {
        Self {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }
}

/// Moment estimates and step counts, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// (unused in the current mode) keep their values and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, hp: &AdamW) {
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - hp.beta1.powi(t);
            let c2 = 1.0 - hp.beta2.powi(t);
            let decay = 1.0 - lr * hp.weight_decay;
            let p = store.get_mut(ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let g = grad[j];
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
    }
}
