//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::qnn::GradientBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl OptimState {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// One AdamW update: `p ← p·(1 − lr·λ)`, then the bias-corrected Adam step
/// `p ← p − lr·m̂ / (√v̂ + eps)`. The decay never enters the moments.
pub fn adamw_step(params: &mut [f64], grads: &GradientBundle, state: &mut OptimState) -> Result<(), TrainError> {
    let g = &grads.total;
    if g.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            g.len(),
            state.m.len()
        )));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index: i });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let decay = 1.0 - lr * state.weight_decay;
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + state.adam_eps);
    }
    Ok(())
}
