use serde::{Deserialize, Serialize};

use super::tensor::{ensure_same_shape, Tensor};
use crate::error::{FeloError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Adam first moments, one per parameter tensor; empty until the first step.
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
            step: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn reset(&mut self) {
        self.first_moments.clear();
        self.second_moments.clear();
        self.step = 0;
    }
}

/// Apply one update to `params` in place.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(FeloError::config(format!(
            "optimizer: {} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        ensure_same_shape("optimizer", p, g)?;
    }
    if !(state.learning_rate > 0.0) {
        return Err(FeloError::config(
            "optimizer learning rate must be positive",
        ));
    }
    match state.kind {
        OptimizerKind::Sgd => {
            let lr = state.learning_rate;
            for (p, g) in params.iter_mut().zip(grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.first_moments.is_empty() {
                state.first_moments = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                state.second_moments = state.first_moments.clone();
            }
            if state.first_moments.len() != grads.len()
                || state
                    .first_moments
                    .iter()
                    .zip(grads)
                    .any(|(m, g)| !m.same_shape(g))
            {
                return Err(FeloError::config(
                    "optimizer: Adam moments do not match parameter shapes",
                ));
            }
            let t = (state.step + 1) as i32;
            let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
                state
                    .first_moments
                    .iter_mut()
                    .zip(state.second_moments.iter_mut()),
            ) {
                let (pd, gd) = (p.data_mut(), g.data());
                for (i, &gv) in gd.iter().enumerate() {
                    let mi = &mut m.data_mut()[i];
                    *mi = b1 * *mi + (1.0 - b1) * gv;
                    let mhat = *mi / c1;
                    let vi = &mut v.data_mut()[i];
                    *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                    let vhat = *vi / c2;
                    pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    state.step += 1;
    Ok(())
}
