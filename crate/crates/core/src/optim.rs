//! Adaptive-moment first-order optimizer.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moments kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update; `grads` must align with the store order.
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gv.f64();
                *mv = beta1 * *mv + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let update = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv = T::of(pv.f64() - update);
            }
        }
    }
}
