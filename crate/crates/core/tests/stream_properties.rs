//! Properties of the synthetic stream, its file format and the run harness.

use proptest::prelude::*;

use ptta_core::domain::{Point, CANONICAL_CLASSES, PEDESTRIAN};
use ptta_core::harness::{
    evaluate_iou, run_tta, AdaptationConfig, AdaptationState, ConfusionMatrix, RunOptions,
};
use ptta_core::model::NetworkParams;
use ptta_core::spatial::{SpatialIndex, FEATURE_DIM};
use ptta_core::stream::{
    generate_sequence, read_sequence, write_sequence, SceneConfig, ShiftConfig,
};

fn scene(seed: u64, frames: usize) -> SceneConfig {
    SceneConfig {
        seed,
        frames,
        ..SceneConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn written_sequences_are_reproducible(seed in 0u64..1000, shift_seed in 0u64..1000) {
        let cfg = scene(seed, 2);
        let shift = ShiftConfig::benchmark_target(shift_seed);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_sequence(&generate_sequence(&cfg, &shift).unwrap(), a.path()).unwrap();
        write_sequence(&generate_sequence(&cfg, &shift).unwrap(), b.path()).unwrap();
        let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
        prop_assert_eq!(fa.len(), 5);
        prop_assert_eq!(fa, fb);

        let back = read_sequence(a.path()).unwrap();
        let original = generate_sequence(&cfg, &shift).unwrap();
        prop_assert_eq!(back.len(), original.len());
        for (r, o) in back.iter().zip(&original) {
            prop_assert_eq!(&r.gt_labels, &o.gt_labels);
            // points round-trip through f32
            for (p, q) in r.points.iter().zip(&o.points) {
                for d in 0..3 {
                    prop_assert!((p[d] - q[d]).abs() <= 1e-5 * (1.0 + q[d].abs()));
                }
            }
        }
    }

    #[test]
    fn every_class_appears_in_every_frame(seed in 0u64..1000, shift_seed in 0u64..1000, jitter in 0.0..0.1f64) {
        let shift = ShiftConfig { jitter_sigma: jitter, ..ShiftConfig::benchmark_target(shift_seed) };
        for frame in generate_sequence(&scene(seed, 3), &shift).unwrap() {
            let gt = frame.gt_labels.as_ref().unwrap();
            prop_assert_eq!(gt.len(), frame.len());
            for c in 0..CANONICAL_CLASSES.len() {
                prop_assert!(gt.iter().any(|l| l == Some(c)), "class {} missing", c);
            }
        }
    }

    #[test]
    fn poses_carry_static_points_between_frames(seed in 0u64..1000, gap in 1usize..4) {
        // without jitter, a surface sample seen in both frames lands exactly
        // on itself after composing the two poses
        let frames = generate_sequence(&scene(seed, gap + 1), &ShiftConfig::none(seed)).unwrap();
        let (prev, cur) = (&frames[0], &frames[gap]);
        let to_cur = cur.pose.inverse().compose(&prev.pose);
        let index = SpatialIndex::build(&cur.points).unwrap();
        let carried: Vec<Point> = prev.points.iter().map(|p| to_cur.apply(p)).collect();
        let exact = carried
            .iter()
            .filter(|p| index.knn(p, 1).unwrap()[0].distance < 1e-9)
            .count();
        prop_assert!(exact as f64 >= 0.5 * prev.len() as f64, "{} of {}", exact, prev.len());
    }
}

#[test]
fn dropout_matches_its_binomial_rate() {
    let cfg = scene(7, 3);
    let keep_all = ShiftConfig::none(42);
    let mut shifted = ShiftConfig::none(42);
    shifted.dropout[PEDESTRIAN] = 0.3;
    let a = generate_sequence(&cfg, &keep_all).unwrap();
    let b = generate_sequence(&cfg, &shifted).unwrap();
    let count = |f: &ptta_core::domain::Frame, c: usize| {
        f.gt_labels
            .as_ref()
            .unwrap()
            .iter()
            .filter(|l| *l == Some(c))
            .count() as f64
    };
    for (fa, fb) in a.iter().zip(&b) {
        let n = count(fa, PEDESTRIAN);
        let kept = count(fb, PEDESTRIAN);
        let sd = (n * 0.3 * 0.7).sqrt();
        assert!((kept - 0.7 * n).abs() <= 3.0 * sd, "kept {kept} of {n}");
        for c in (0..CANONICAL_CLASSES.len()).filter(|&c| c != PEDESTRIAN) {
            assert_eq!(count(fa, c), count(fb, c));
        }
    }
}

fn tiny_stream() -> Vec<ptta_core::domain::Frame> {
    generate_sequence(&scene(3, 4), &ShiftConfig::benchmark_target(5)).unwrap()
}

#[test]
fn predictions_are_made_before_the_update() {
    let frames = tiny_stream();
    let source = NetworkParams::init(FEATURE_DIM, CANONICAL_CLASSES.len(), 1);
    let mut state = AdaptationState::new(source.clone(), AdaptationConfig::default()).unwrap();
    let source_pred = state.predict_source(&frames[0]).unwrap();
    for frame in &frames {
        let before = state.predict(frame).unwrap();
        let out = state.adapt_frame(frame).unwrap();
        assert_eq!(out.eval_pred, before);
        // the source model is never touched
        assert_eq!(state.source(), &source);
    }
    assert_ne!(state.target(), &source);
    assert_eq!(state.predict_source(&frames[0]).unwrap(), source_pred);
}

#[test]
fn report_matches_offline_scoring() {
    let frames = tiny_stream();
    let source = NetworkParams::init(FEATURE_DIM, CANONICAL_CLASSES.len(), 2);
    let report = run_tta(
        &frames,
        &source,
        &AdaptationConfig::default(),
        RunOptions {
            keep_predictions: true,
        },
    )
    .unwrap();
    assert_eq!(report.predictions.len(), frames.len());
    let mut pooled = ConfusionMatrix::new(CANONICAL_CLASSES.len());
    for ((id, pred), (frame, record)) in report
        .predictions
        .iter()
        .zip(frames.iter().zip(&report.frames))
    {
        assert_eq!(*id, frame.frame_id);
        let gt = frame.gt_labels.as_ref().unwrap();
        let single = evaluate_iou(pred, gt, CANONICAL_CLASSES.len()).unwrap();
        assert_eq!(single, record.iou);
        pooled.add(pred, gt).unwrap();
    }
    assert_eq!(pooled.iou(), report.cumulative);
}
