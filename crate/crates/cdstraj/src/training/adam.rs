use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{ParamStore, Tensor};

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Standard bias-corrected adaptive-moment update over every parameter,
/// reading the gradients currently held in the store.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for name in params.names() {
        let grad = params.grad(&name)?.clone();
        let m = state.m.get_mut(&name).expect("moment slot");
        let v = state.v.get_mut(&name).expect("moment slot");
        let value = params.get_mut(&name)?;
        for i in 0..grad.len() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients down to the given global L2 norm when they exceed
/// it; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}
