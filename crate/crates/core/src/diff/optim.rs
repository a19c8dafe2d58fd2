use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// One SGD-with-momentum update: `v ← μ·v + g`, `p ← p − lr·v`, then the
/// gradient accumulators are cleared.
///
/// Fails before touching any parameter if a gradient is not finite.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for (_, p) in params.iter_mut() {
        let v = p.velocity.data_mut();
        for ((vi, gi), xi) in v
            .iter_mut()
            .zip(p.grad.data())
            .zip(p.value.data_mut().iter_mut())
        {
            *vi = momentum * *vi + gi;
            *xi -= lr * *vi;
        }
    }
    params.zero_grads();
    Ok(())
}

/// First and second moment estimates for [`adam_step`], one buffer per
/// parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam update, then the gradient accumulators are
/// cleared. Fails before touching any parameter if a gradient is not finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    if state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} buffers for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.step = state.step.saturating_add(1);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step);
    let c2 = 1.0 - b2.powi(state.step);
    for ((_, p), (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let grad = p.grad.data();
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    params.zero_grads();
    Ok(())
}
