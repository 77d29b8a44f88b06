//! Local pseudo-labels from the frozen source model.
//!
//! Predictions are smoothed over each point's spatial neighborhood, scored by
//! `certainty × purity` and filtered per class with a percentile threshold.

use crate::domain::{argmax, ConfidenceField, Frame, LabelField, ProbabilityField, SelectionMask};
use crate::error::{check_len, Error, Result};
use crate::par::{self, ExecMode};
use crate::spatial::{NeighborTable, SpatialIndex};

/// Distance-weighted average of the predictions of each point's `k + 1`
/// nearest neighbors (the point itself included), with weights `exp(-d)`.
pub fn aggregate_predictions(
    probs: &ProbabilityField,
    index: &SpatialIndex,
    k: usize,
) -> Result<ProbabilityField> {
    check_len(probs.len(), index.len())?;
    let table = index.neighbor_table(k + 1, ExecMode::default())?;
    aggregate_with_table(probs, &table, ExecMode::default())
}

pub(crate) fn aggregate_with_table(
    probs: &ProbabilityField,
    table: &NeighborTable,
    mode: ExecMode,
) -> Result<ProbabilityField> {
    check_len(probs.len(), table.len())?;
    let c = probs.classes();
    let mut out = vec![0.0; probs.len() * c];
    par::fill_rows(&mut out, c, mode, |i, row| {
        let mut wsum = 0.0;
        for (&j, &d) in table.indices(i).iter().zip(table.distances(i)) {
            let w = (-d).exp();
            wsum += w;
            for (acc, &p) in row.iter_mut().zip(probs.row(j)) {
                *acc += w * p;
            }
        }
        for v in row.iter_mut() {
            *v /= wsum;
        }
    });
    ProbabilityField::from_raw(out, c)
}

/// One-hot argmax labels, ties to the smallest class id.
pub fn local_pseudo_labels(p_hat: &ProbabilityField) -> LabelField {
    p_hat.argmax()
}

const ROUNDING_SLACK: f64 = 1e-12;

/// One minus the entropy of `dist` normalized by `ln(classes)`, clamped to [0, 1].
pub fn normalized_certainty(dist: &[f64], classes: usize) -> f64 {
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let c = 1.0 - h / (classes as f64).ln();
    // a uniform distribution should score exactly zero despite rounding in `h`
    if c < ROUNDING_SLACK {
        0.0
    } else {
        c.min(1.0)
    }
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::ConfigInvalid(format!(
            "entropy normalization needs at least 2 classes, got {classes}"
        )));
    }
    Ok(())
}

pub fn prediction_certainty(p_hat: &ProbabilityField, classes: usize) -> Result<ConfidenceField> {
    check_classes(classes)?;
    Ok(ConfidenceField(
        p_hat
            .rows()
            .map(|r| normalized_certainty(r, classes))
            .collect(),
    ))
}

/// Label purity of each point's `k + 1` neighborhood.
pub fn geometric_purity(
    labels: &LabelField,
    index: &SpatialIndex,
    k: usize,
    classes: usize,
) -> Result<ConfidenceField> {
    check_len(labels.len(), index.len())?;
    let table = index.neighbor_table(k + 1, ExecMode::default())?;
    purity_with_table(labels, &table, classes, ExecMode::default())
}

pub(crate) fn purity_with_table(
    labels: &LabelField,
    table: &NeighborTable,
    classes: usize,
    mode: ExecMode,
) -> Result<ConfidenceField> {
    check_classes(classes)?;
    check_len(labels.len(), table.len())?;
    labels.validate(classes)?;
    let values = par::map_indexed(labels.len(), mode, |i| {
        let nbrs = table.indices(i);
        let mut hist = vec![0.0; classes];
        for &j in nbrs {
            // labels come from an argmax, so IGNORE does not occur here
            if let Some(c) = labels.get(j) {
                hist[c] += 1.0;
            }
        }
        let size = nbrs.len() as f64;
        for h in &mut hist {
            *h /= size;
        }
        normalized_certainty(&hist, classes)
    });
    Ok(ConfidenceField(values))
}

pub fn confidence_scores(
    certainty: &ConfidenceField,
    purity: &ConfidenceField,
) -> Result<ConfidenceField> {
    check_len(certainty.len(), purity.len())?;
    Ok(ConfidenceField(
        certainty
            .0
            .iter()
            .zip(&purity.0)
            .map(|(c, a)| c * a)
            .collect(),
    ))
}

/// Nearest-rank `lambda`-th percentile of `sorted` (ascending). Rank zero
/// (`lambda = 0` or an empty slice) yields −∞.
pub fn nearest_rank_threshold(sorted: &[f64], lambda: f64) -> f64 {
    let m = sorted.len();
    let rank = (lambda / 100.0 * m as f64).ceil() as usize;
    if rank == 0 {
        f64::NEG_INFINITY
    } else {
        sorted[rank.min(m) - 1]
    }
}

/// Per pseudo-label class, keeps the points whose score is strictly above the
/// class's nearest-rank `lambda`-th percentile. IGNORE points are never selected.
pub fn select_per_class(
    labels: &LabelField,
    scores: &ConfidenceField,
    lambda: f64,
) -> Result<SelectionMask> {
    check_len(labels.len(), scores.len())?;
    if !(0.0..100.0).contains(&lambda) {
        return Err(Error::ConfigInvalid(format!(
            "lambda {lambda} outside [0,100)"
        )));
    }
    let classes = labels.iter().flatten().max().map_or(0, |c| c + 1);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (l, &s) in labels.iter().zip(&scores.0) {
        if let Some(c) = l {
            groups[c].push(s);
        }
    }
    let thresholds: Vec<f64> = groups
        .iter_mut()
        .map(|g| {
            g.sort_by(f64::total_cmp);
            nearest_rank_threshold(g, lambda)
        })
        .collect();
    Ok(SelectionMask(
        labels
            .iter()
            .zip(&scores.0)
            .map(|(l, &s)| l.is_some_and(|c| s > thresholds[c]))
            .collect(),
    ))
}

/// Everything the local stage produces for one frame.
#[derive(Clone, Debug)]
pub struct LocalLabels {
    /// Pseudo-label of every point.
    pub labels: LabelField,
    pub scores: ConfidenceField,
    /// High-confidence subset.
    pub selected: SelectionMask,
}

/// Local stage over a frame, given the frozen source model's probabilities.
pub fn run_lgl(
    frame: &Frame,
    source_probs: &ProbabilityField,
    k: usize,
    lambda: f64,
    classes: usize,
) -> Result<LocalLabels> {
    let index = SpatialIndex::build(&frame.points)?;
    let table = index.neighbor_table(k + 1, ExecMode::default())?;
    run_lgl_with_table(source_probs, &table, lambda, classes, ExecMode::default())
}

/// `table` must hold `k + 1` neighbors per point.
pub(crate) fn run_lgl_with_table(
    source_probs: &ProbabilityField,
    table: &NeighborTable,
    lambda: f64,
    classes: usize,
    mode: ExecMode,
) -> Result<LocalLabels> {
    let p_hat = aggregate_with_table(source_probs, table, mode)?;
    let labels = local_pseudo_labels(&p_hat);
    let certainty = prediction_certainty(&p_hat, classes)?;
    let purity = purity_with_table(&labels, table, classes, mode)?;
    let scores = confidence_scores(&certainty, &purity)?;
    let selected = select_per_class(&labels, &scores, lambda)?;
    Ok(LocalLabels {
        labels,
        scores,
        selected,
    })
}

/// Single-point baseline: raw argmax labels ranked by prediction certainty only.
pub fn run_entropy_baseline(
    source_probs: &ProbabilityField,
    lambda: f64,
    classes: usize,
) -> Result<LocalLabels> {
    let labels = LabelField(source_probs.rows().map(|r| Some(argmax(r))).collect());
    let scores = prediction_certainty(source_probs, classes)?;
    let selected = select_per_class(&labels, &scores, lambda)?;
    Ok(LocalLabels {
        labels,
        scores,
        selected,
    })
}
