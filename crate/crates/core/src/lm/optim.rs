use serde::{Deserialize, Serialize};

use super::params::{Grads, ModelParams};
use crate::error::{Error, Result};

/// Hyperparameters of the bias-corrected adaptive-moment update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Constant 5e-5, the rate used for billion-parameter models.
    pub fn large_model_preset() -> Self {
        AdamConfig { lr: 5e-5, ..Default::default() }
    }
}

/// Moment accumulators plus step counter; learning rate is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        OptimizerState { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn for_params(params: &ModelParams, config: AdamConfig) -> Self {
        Self::new(params.len(), config)
    }

    /// One update of `params` against `grads`.
    pub fn update(&mut self, params: &mut [f32], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer shape mismatch: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
            let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let delta = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *p = (*p as f64 - delta) as f32;
        }
        Ok(())
    }
}

pub fn opt_step(params: &mut ModelParams, grads: &Grads, state: &mut OptimizerState) -> Result<()> {
    state.update(params.as_mut_slice(), &grads.data)
}
