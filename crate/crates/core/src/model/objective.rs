//! Full adaptation objective: segmentation loss on the current frame plus the
//! optional temporal term.

use crate::domain::{ConfidenceField, LabelField};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::par::ExecMode;
use crate::temporal::{self, TemporalInputs, TemporalLoss, TemporalTargets};

use super::loss::soft_dice_loss;
use super::network::{Gradients, NetworkParams};

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub features: &'a Matrix,
    /// Supervision for the segmentation term; IGNORE points are unsupervised.
    pub targets: &'a LabelField,
    pub scores: &'a ConfidenceField,
    pub beta_hat: f64,
    /// `None` disables the temporal term.
    pub temporal: Option<TemporalInputs<'a>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub segmentation: f64,
    pub temporal: f64,
    pub total: f64,
    pub supervised: usize,
    pub temporal_pairs: TemporalLoss,
}

/// Loss value and gradient with temporal targets taken from `params`.
pub fn total_loss_and_grad(
    params: &NetworkParams,
    inputs: &ObjectiveInputs,
    mode: ExecMode,
) -> Result<(LossBreakdown, Gradients)> {
    let targets = match &inputs.temporal {
        Some(t) if !t.pairs.is_empty() => Some(temporal::temporal_targets(params, t, mode)?),
        _ => None,
    };
    let mut grads = params.zero_grads();
    let loss = evaluate_objective(params, inputs, targets.as_ref(), Some(&mut grads), mode)?;
    Ok((loss, grads))
}

/// Objective with explicit temporal targets. Passing the same targets while
/// perturbing `params` gives the function whose exact gradient
/// [`total_loss_and_grad`] returns.
pub fn evaluate_objective(
    params: &NetworkParams,
    inputs: &ObjectiveInputs,
    temporal_targets: Option<&TemporalTargets>,
    mut grads: Option<&mut Gradients>,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    let forward = params.forward(inputs.features, mode)?;
    let dice = soft_dice_loss(
        &forward.probs,
        inputs.targets,
        inputs.scores,
        inputs.beta_hat,
    )?;
    if let Some(g) = grads.as_deref_mut() {
        if dice.supervised > 0 {
            params.backward_trunk(&forward.cache, Some(&dice.grad_logits), None, g, mode);
        }
    }
    let mut out = LossBreakdown {
        segmentation: dice.value,
        supervised: dice.supervised,
        ..Default::default()
    };
    if let (Some(t), Some(targets)) = (&inputs.temporal, temporal_targets) {
        let tl = temporal::temporal_loss_against(params, t, targets, grads, mode)?;
        out.temporal = tl.value;
        out.temporal_pairs = tl;
    }
    out.total = out.segmentation + out.temporal;
    Ok(out)
}
