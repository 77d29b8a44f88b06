use crate::domain::LabelField;
use crate::error::{check_len, Result};

/// Accumulated ground-truth × prediction counts. Points with IGNORE ground
/// truth are skipped; IGNORE predictions on labelled points count as misses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    unpredicted: Vec<u64>,
}

/// Per-class IoU (`None` where the class has zero union) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IouResult {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with non-zero union; NaN when there are none.
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            unpredicted: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelField, gt: &LabelField) -> Result<()> {
        check_len(pred.len(), gt.len())?;
        pred.validate(self.classes)?;
        gt.validate(self.classes)?;
        for (p, g) in pred.iter().zip(gt.iter()) {
            match (g, p) {
                (Some(g), Some(p)) => self.counts[g * self.classes + p] += 1,
                (Some(g), None) => self.unpredicted[g] += 1,
                (None, _) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unpredicted.iter_mut().zip(&other.unpredicted) {
            *a += b;
        }
    }

    pub fn iou(&self) -> IouResult {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c)
                    .filter(|&p| p != k)
                    .map(|p| self.get(k, p))
                    .sum::<u64>()
                    + self.unpredicted[k];
                let fp: u64 = (0..c).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouResult { per_class, miou }
    }
}

pub fn evaluate_iou(pred: &LabelField, gt: &LabelField, classes: usize) -> Result<IouResult> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.iou())
}

/// Fraction of points whose label is non-IGNORE and equal to ground truth,
/// over the points where `label` is non-IGNORE and ground truth exists.
pub fn label_accuracy(labels: &LabelField, gt: &LabelField) -> Result<Option<f64>> {
    check_len(labels.len(), gt.len())?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (l, g) in labels.iter().zip(gt.iter()) {
        if let (Some(l), Some(g)) = (l, g) {
            total += 1;
            hit += usize::from(l == g);
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn hand_example() {
        let gt = LabelField::from_classes([0, 0, 1, 1]);
        let pred = LabelField::from_classes([0, 1, 1, 1]);
        let r = evaluate_iou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let gt = LabelField::from_classes([2, 2, 0]);
        let r = evaluate_iou(&gt, &gt, 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn disjoint_prediction() {
        let gt = LabelField::from_classes([0, 1]);
        let pred = LabelField::from_classes([1, 0]);
        let r = evaluate_iou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn ignore_ground_truth_is_skipped() {
        let gt = LabelField(vec![Some(0), None]);
        let pred = LabelField::from_classes([0, 1]);
        let r = evaluate_iou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None]);
    }

    #[test]
    fn length_mismatch() {
        let a = LabelField::from_classes([0]);
        let b = LabelField::from_classes([0, 1]);
        assert!(matches!(
            evaluate_iou(&a, &b, 2),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn accuracy() {
        let gt = LabelField::from_classes([0, 1, 1]);
        let l = LabelField(vec![Some(0), None, Some(0)]);
        assert_eq!(label_accuracy(&l, &gt).unwrap(), Some(0.5));
    }
}
