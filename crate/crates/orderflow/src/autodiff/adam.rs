//! Adam with bias correction, separate learning rates for the log-Z slice,
//! and optional global gradient-norm clipping.

use super::store::ParamStore;
use crate::error::{Error, Result};
use std::ops::Range;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub lr_logz: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm; gradients above it are rescaled.
    pub grad_clip: Option<f64>,
}

impl AdamState {
    pub fn new(param_len: usize, lr: f64, lr_logz: f64, grad_clip: Option<f64>) -> Self {
        AdamState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            lr,
            lr_logz,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
        }
    }
}

/// One Adam update. Rejects non-finite gradients without touching the
/// parameters or the optimizer state.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[f64],
    state: &mut AdamState,
    logz: Range<usize>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "gradient length {} does not match parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    let mut norm_sq = 0.0;
    for g in grads {
        if !g.is_finite() {
            return Err(Error::Diverged(
                "non-finite gradient; step rejected".to_string(),
            ));
        }
        norm_sq += g * g;
    }
    let scale = match state.grad_clip {
        Some(max) if norm_sq.sqrt() > max => max / norm_sq.sqrt(),
        _ => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grads[i] * scale;
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let lr = if logz.contains(&i) {
            state.lr_logz
        } else {
            state.lr
        };
        values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if !params.all_finite() {
        return Err(Error::Diverged(
            "parameters became non-finite after the update".to_string(),
        ));
    }
    Ok(())
}
