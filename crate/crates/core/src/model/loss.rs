use crate::domain::{ConfidenceField, LabelField, ProbabilityField};
use crate::error::{check_len, Result};
use crate::matrix::Matrix;

/// Default upper bound of the adaptive smoothing strength.
pub const DEFAULT_BETA_HAT: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct DiceLoss {
    pub value: f64,
    /// Gradient with respect to the logits that produced `probs`.
    pub grad_logits: Matrix,
    pub supervised: usize,
}

/// Smoothing strength for a point with confidence `score`.
pub fn adaptive_beta(beta_hat: f64, score: f64) -> f64 {
    beta_hat * (1.0 - score)
}

/// Smoothed one-hot target `(1 − β)·onehot + β/C`.
pub fn smoothed_target(class: usize, classes: usize, beta: f64) -> Vec<f64> {
    let mut t = vec![beta / classes as f64; classes];
    t[class] += 1.0 - beta;
    t
}

/// Soft Dice loss against confidence-smoothed targets, averaged over the
/// non-IGNORE points. Per point: `1 − 2·(y·t) / (Σy + Σt)`.
pub fn soft_dice_loss(
    probs: &ProbabilityField,
    targets: &LabelField,
    scores: &ConfidenceField,
    beta_hat: f64,
) -> Result<DiceLoss> {
    check_len(probs.len(), targets.len())?;
    check_len(probs.len(), scores.len())?;
    let classes = probs.classes();
    targets.validate(classes)?;
    let supervised = targets.supervised_count();
    let mut grad_logits = Matrix::zeros(probs.len(), classes);
    if supervised == 0 {
        return Ok(DiceLoss {
            value: 0.0,
            grad_logits,
            supervised,
        });
    }
    let inv_m = 1.0 / supervised as f64;
    let mut total = 0.0;
    let mut g = vec![0.0; classes];
    for (i, target) in targets.iter().enumerate() {
        let Some(class) = target else { continue };
        let y = probs.row(i);
        let t = smoothed_target(class, classes, adaptive_beta(beta_hat, scores.0[i]));
        let dot: f64 = y.iter().zip(&t).map(|(a, b)| a * b).sum();
        let denom: f64 = y.iter().sum::<f64>() + t.iter().sum::<f64>();
        total += 1.0 - 2.0 * dot / denom;
        // dL/dy_c, then through the softmax Jacobian
        for (gc, &tc) in g.iter_mut().zip(&t) {
            *gc = (-2.0 * tc / denom + 2.0 * dot / (denom * denom)) * inv_m;
        }
        let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        for (k, out) in grad_logits.row_mut(i).iter_mut().enumerate() {
            *out = y[k] * (g[k] - gy);
        }
    }
    Ok(DiceLoss {
        value: total * inv_m,
        grad_logits,
        supervised,
    })
}
