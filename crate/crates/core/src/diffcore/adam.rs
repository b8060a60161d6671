use serde::{Deserialize, Serialize};

use super::param::{GradientRecord, ParamSet};
use crate::error::{FlowsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays.iter().map(|a| vec![0.0; a.len()]).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched on error.
pub fn adam_step(params: &mut ParamSet, grads: &GradientRecord, state: &mut AdamState) -> Result<()> {
    if grads.grads.len() != params.len() || state.first.len() != params.len() {
        return Err(FlowsError::Shape("gradient record does not match parameters".into()));
    }
    for (g, a) in grads.grads.iter().zip(&params.arrays) {
        if g.len() != a.len() {
            return Err(FlowsError::Shape(format!("gradient for `{}` has wrong length", a.name)));
        }
    }
    if let Some(name) = grads.first_non_finite(params) {
        return Err(FlowsError::NonFinite {
            name: name.to_string(),
            message: "gradient".into(),
        });
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .arrays
        .iter_mut()
        .zip(&grads.grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.values.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
