use crate::error::{Error, Result};

use super::network::{Gradients, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay subtracts `lr·wd·θ` from the update; coupled decay adds
    /// `wd·θ` to the gradient before the moment updates.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams) -> Self {
        let n = params.num_trainable();
        OptimizerState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_compatible(grads)?;
    let n = params.num_trainable();
    if state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state holds {} moments for {n} parameters",
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((theta, &g), m), v) in params
        .trainable_mut()
        .zip(grads.values())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let g = if cfg.decoupled {
            g
        } else {
            g + cfg.weight_decay * *theta
        };
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let mut update = m_hat / (v_hat.sqrt() + cfg.eps);
        if cfg.decoupled {
            update += cfg.weight_decay * *theta;
        }
        *theta -= cfg.lr * update;
    }
    Ok(())
}
