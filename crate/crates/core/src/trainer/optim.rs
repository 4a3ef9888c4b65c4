//! AdamW with decoupled weight decay and a linear warmup schedule.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamWState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// Linear ramp from 0 at step 0 to `base_lr` at `warmup_steps`, then flat.
pub fn lr_schedule(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

/// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p` with bias-corrected moments.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    hyper: &AdamWHyper,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i}"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + hyper.eps) + lr * hyper.weight_decay * *pv;
        }
    }
    Ok(())
}
