use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, b1: 0.9, b2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based step count.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.b1.powi(t as i32);
    let c2 = 1.0 - cfg.b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.b1 * m[i] + (1.0 - cfg.b1) * g;
        v[i] = cfg.b2 * v[i] + (1.0 - cfg.b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment buffers for every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.trainable().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads` must follow `params.trainable()` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        for (((_, p), g), (m, v)) in params.trainable_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            adam_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, &self.config);
        }
        Ok(())
    }
}
