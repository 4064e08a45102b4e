//! Bias-corrected Adam with optional decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments mirroring the given parameter shapes.
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over aligned (params, grads) slices. `weight_decay`
/// applies decoupled decay (lr * wd * w subtracted after the Adam step).
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidConfig(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
                context: "adam_step parameter/gradient",
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                location: "adam_step gradient".to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((pv, &gv), mv), vv) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.eps);
            if weight_decay > 0.0 {
                *pv -= lr * weight_decay * *pv;
            }
        }
    }
    Ok(())
}
