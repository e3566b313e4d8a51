//! Adam with bias correction, operating on the named parameter tensors.
//!
//! Parameters and moment estimates are re-quantized to f32 after every step
//! so a checkpoint written mid-run restarts bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelParams;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates aligned with `ModelParams::tensors`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState {
            m: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One optimizer step; `grads` must align with the parameter tensors.
/// A zero gradient leaves the parameters unchanged but still advances the
/// timestep.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::shape("adam_step tensors", params.tensors.len(), grads.len()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (ti, tensor) in params.tensors.iter_mut().enumerate() {
        if grads[ti].len() != tensor.data.len() {
            return Err(Error::shape("adam_step grad", tensor.data.len(), grads[ti].len()));
        }
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for (k, p) in tensor.data.iter_mut().enumerate() {
            let g = grads[ti][k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            // keep everything exactly representable in f32
            *p = *p as f32 as f64;
            m[k] = m[k] as f32 as f64;
            v[k] = v[k] as f32 as f64;
        }
    }
    Ok(())
}
