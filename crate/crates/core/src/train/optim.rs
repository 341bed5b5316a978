//! AdamW with decoupled weight decay.

use crate::model::{Gradients, MultiTaskModel};
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per tensor, in the model's tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &MultiTaskModel) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor. `step` is the 1-based step count
/// used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    decay: bool,
) {
    assert!(theta.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let c1 = 1.0 - BETA1.powf(step as f64);
    let c2 = 1.0 - BETA2.powf(step as f64);
    let wd = if decay { weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + EPSILON) + wd * theta[i]);
    }
}

/// Advances `state` by one step and updates every model tensor; decay
/// follows each tensor's flag (off for biases and norm parameters).
pub fn adamw_step(model: &mut MultiTaskModel, grads: &Gradients, state: &mut OptimizerState, lr: f64, weight_decay: f64) {
    state.step += 1;
    let step = state.step;
    let gs = grads.tensors();
    let ps = model.tensors_mut();
    assert_eq!(ps.len(), gs.len(), "gradient layout differs from model");
    assert_eq!(ps.len(), state.m.len(), "optimizer state layout differs from model");
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        debug_assert_eq!(p.name, g.name);
        adamw_update(p.data, g.data, m, v, step, lr, weight_decay, p.decay);
    }
}
