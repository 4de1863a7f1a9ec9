use serde::{Deserialize, Serialize};

use super::params::Parameterized;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

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
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily on the first step
/// and then line up with the model's parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One Adam update of `params` from `grads`. Rejects the whole step, leaving
/// everything untouched, if any gradient entry is non-finite.
pub fn adam_step<M: Parameterized>(state: &mut AdamState, params: &mut M, grads: &M) -> Result<()> {
    let grads = grads.params();
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let mut params = params.params_mut();
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for ((name, p), (_, g)) in params.iter().zip(&grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|(_, g)| g.zeros_like()).collect();
        state.second = state.first.clone();
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].1.data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
