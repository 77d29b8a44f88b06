//! Property tests for the segmenter, its losses and the temporal term.

use proptest::prelude::*;

use ptta_core::matrix::Matrix;
use ptta_core::model::{
    adaptive_beta, evaluate_objective, smoothed_target, softmax_rows, total_loss_and_grad,
    NetworkParams, ObjectiveInputs,
};
use ptta_core::spatial::{Correspondence, CorrespondenceSet, FEATURE_DIM};
use ptta_core::temporal::{temporal_loss, TemporalInputs};
use ptta_core::{ConfidenceField, ExecMode, LabelField};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn pairs(n_cur: usize, n_prev: usize, count: usize, seed: u64) -> CorrespondenceSet {
    CorrespondenceSet {
        pairs: (0..count)
            .map(|k| Correspondence {
                current: (k * 7 + seed as usize) % n_cur,
                previous: (k * 3 + 1) % n_prev,
                distance: 0.05,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(logits in matrix(8, 5, 800.0)) {
        let p = softmax_rows(&logits);
        for row in p.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn smoothing_stays_in_range(beta_hat in 0.0..=1.0f64, score in 0.0..=1.0f64, classes in 2usize..20, class in 0usize..20) {
        let beta = adaptive_beta(beta_hat, score);
        prop_assert!((0.0..=beta_hat).contains(&beta));
        let t = smoothed_target(class % classes, classes, beta);
        // a few ulps of rounding in the row sum
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() <= 4.0 * f64::EPSILON);
        prop_assert!(t.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn temporal_loss_is_bounded(
        cur in matrix(10, FEATURE_DIM, 2.0),
        prev in matrix(9, FEATURE_DIM, 2.0),
        s_cur in prop::collection::vec(0.0..=1.0f64, 10),
        s_prev in prop::collection::vec(0.0..=1.0f64, 9),
        count in 1usize..12,
        seed in 0u64..50,
        weighted in any::<bool>(),
        normalized in any::<bool>(),
    ) {
        let net = NetworkParams::init(FEATURE_DIM, 4, seed);
        let set = pairs(10, 9, count, seed);
        let (sc, sp) = (ConfidenceField(s_cur), ConfidenceField(s_prev));
        let inputs = TemporalInputs {
            current_features: &cur,
            previous_features: &prev,
            pairs: &set,
            current_scores: &sc,
            previous_scores: &sp,
            confidence_weighted: weighted,
            normalized_heads: normalized,
        };
        let loss = temporal_loss(&net, &inputs, None, ExecMode::Sequential).unwrap();
        prop_assert!((-1.0..=1.0).contains(&loss.value));
        if weighted {
            let bound = sc.0.iter().chain(&sp.0).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(loss.value.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn unit_confidence_makes_weighting_irrelevant(
        cur in matrix(8, FEATURE_DIM, 2.0),
        prev in matrix(8, FEATURE_DIM, 2.0),
        seed in 0u64..50,
        normalized in any::<bool>(),
    ) {
        let net = NetworkParams::init(FEATURE_DIM, 3, seed);
        let set = pairs(8, 8, 6, seed);
        let ones = ConfidenceField::ones(8);
        let run = |weighted: bool| {
            let inputs = TemporalInputs {
                current_features: &cur,
                previous_features: &prev,
                pairs: &set,
                current_scores: &ones,
                previous_scores: &ones,
                confidence_weighted: weighted,
                normalized_heads: normalized,
            };
            let mut g = net.zero_grads();
            let l = temporal_loss(&net, &inputs, Some(&mut g), ExecMode::Sequential).unwrap();
            (l, g)
        };
        let (a, b) = (run(true), run(false));
        prop_assert_eq!(a.0.value.to_bits(), b.0.value.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn all_ignored_targets_leave_only_the_temporal_term(
        cur in matrix(12, FEATURE_DIM, 2.0),
        prev in matrix(10, FEATURE_DIM, 2.0),
        seed in 0u64..50,
    ) {
        let net = NetworkParams::init(FEATURE_DIM, 3, seed);
        let set = pairs(12, 10, 8, seed);
        let (sc, sp) = (ConfidenceField::ones(12), ConfidenceField::ones(10));
        let temporal = TemporalInputs {
            current_features: &cur,
            previous_features: &prev,
            pairs: &set,
            current_scores: &sc,
            previous_scores: &sp,
            confidence_weighted: true,
            normalized_heads: true,
        };
        let ignored = LabelField::ignored(12);
        let inputs = ObjectiveInputs {
            features: &cur,
            targets: &ignored,
            scores: &sc,
            beta_hat: 0.3,
            temporal: Some(temporal),
        };
        let (total, g_total) = total_loss_and_grad(&net, &inputs, ExecMode::Sequential).unwrap();
        let mut g_reg = net.zero_grads();
        let reg = temporal_loss(&net, &temporal, Some(&mut g_reg), ExecMode::Sequential).unwrap();
        prop_assert_eq!(total.segmentation, 0.0);
        prop_assert_eq!(total.total.to_bits(), reg.value.to_bits());
        prop_assert_eq!(g_total, g_reg);
    }

    #[test]
    fn duplicated_supervision_keeps_the_dice_mean(
        x in matrix(6, FEATURE_DIM, 2.0),
        labels in prop::collection::vec(0usize..3, 6),
        seed in 0u64..50,
    ) {
        let net = NetworkParams::init(FEATURE_DIM, 3, seed);
        let s = ConfidenceField((0..6).map(|i| i as f64 / 6.0).collect());
        let eval = |x: &Matrix, l: &LabelField, s: &ConfidenceField| {
            let inputs = ObjectiveInputs { features: x, targets: l, scores: s, beta_hat: 0.3, temporal: None };
            evaluate_objective(&net, &inputs, None, None, ExecMode::Sequential).unwrap().segmentation
        };
        let once = eval(&x, &LabelField::from_classes(labels.clone()), &s);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| x.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        let mut doubled = labels.clone();
        doubled.extend(labels);
        let mut s2 = s.0.clone();
        s2.extend(s.0.clone());
        let twice = eval(&Matrix::from_rows(&rows), &LabelField::from_classes(doubled), &ConfidenceField(s2));
        prop_assert!((once - twice).abs() <= 1e-12);
    }
}
