//! Bias-corrected Adam.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            config,
        }
    }
}

/// One Adam step in place. A non-finite gradient leaves both the parameters
/// and the state untouched.
pub fn adam_update(state: &mut AdamState, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape("adam: parameter, gradient and state lengths differ".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { block: 0 });
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);
    for (((p, g), m), v) in params
        .0
        .iter_mut()
        .zip(&grads.0)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
    }
    Ok(())
}
