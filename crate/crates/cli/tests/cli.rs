//! End-to-end runs of the `ptta` binary on a tiny generated dataset.

use std::path::Path;
use std::process::Command;

use ptta_core::stream::{format_config, SceneConfig, ShiftConfig};

fn ptta(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ptta"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "ptta {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Last number on the first line starting with `prefix`.
fn value_after(text: &str, prefix: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no line starting with {prefix:?} in\n{text}"));
    line.split_whitespace()
        .filter_map(|w| w.trim_matches(|c| c == '(' || c == ')').parse::<f64>().ok())
        .next()
        .unwrap()
}

#[test]
fn generate_pretrain_adapt_eval_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (source, target) = (root.join("source"), root.join("target"));

    let scene = SceneConfig {
        seed: 5,
        frames: 3,
        ..SceneConfig::default()
    };
    let config = root.join("target.cfg");
    std::fs::write(
        &config,
        format_config(&scene, &ShiftConfig::benchmark_target(9)),
    )
    .unwrap();

    ptta(&[
        "generate",
        "--seed",
        "1",
        "--frames",
        "3",
        "--out",
        p(&source),
    ]);
    let out = ptta(&["generate", "--config", p(&config), "--out", p(&target)]);
    assert!(out.starts_with("wrote 3 frames"), "{out}");
    assert!(target.join("000002.bin").is_file() && target.join("poses.txt").is_file());

    let ckpt = root.join("source.ckpt");
    let out = ptta(&[
        "pretrain",
        "--source",
        p(&source),
        "--out",
        p(&ckpt),
        "--epochs",
        "2",
    ]);
    assert!(out.contains("epoch 1: loss"), "{out}");

    let (report, preds, adapted) = (
        root.join("report.csv"),
        root.join("pred"),
        root.join("adapted.ckpt"),
    );
    let out = ptta(&[
        "adapt",
        "--checkpoint",
        p(&ckpt),
        "--target",
        p(&target),
        "--window",
        "1",
        "--report",
        p(&report),
        "--dump-pred",
        p(&preds),
        "--save-checkpoint",
        p(&adapted),
    ]);
    let adapted_miou = value_after(&out, "cumulative mIoU");
    let csv = std::fs::read_to_string(&report).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(
        header.starts_with("frame,class0_iou,") && header.ends_with(",mIoU,time_s"),
        "{header}"
    );
    assert_eq!(csv.lines().count(), 4);
    assert!(adapted.is_file());
    assert_ne!(
        std::fs::read(&adapted).unwrap(),
        std::fs::read(&ckpt).unwrap()
    );

    // offline scoring of the dumped predictions reproduces the report
    let out = ptta(&["eval", "--pred", p(&preds), "--gt", p(&target)]);
    assert!(
        (value_after(&out, "mIoU") - adapted_miou).abs() < 0.006,
        "{out}"
    );

    // the sequential path gives the same predictions
    let preds_seq = root.join("pred_seq");
    ptta(&[
        "--sequential",
        "adapt",
        "--checkpoint",
        p(&ckpt),
        "--target",
        p(&target),
        "--window",
        "1",
        "--dump-pred",
        p(&preds_seq),
    ]);
    for f in ["000000.label", "000001.label", "000002.label"] {
        assert_eq!(
            std::fs::read(preds.join(f)).unwrap(),
            std::fs::read(preds_seq.join(f)).unwrap()
        );
    }

    let rungs = root.join("rungs");
    let out = ptta(&[
        "ablate",
        "--checkpoint",
        p(&ckpt),
        "--target",
        p(&target),
        "--window",
        "1",
        "--report-dir",
        p(&rungs),
    ]);
    for rung in ["LGL", "+TGR", "+GGF", "+CW", "+ALG"] {
        assert!(out.lines().any(|l| l.starts_with(rung)), "{out}");
    }
    // the last rung is the full configuration run above
    assert!(
        (value_after(&out, "+ALG") - adapted_miou).abs() < 0.006,
        "{out}"
    );
    assert_eq!(std::fs::read_dir(&rungs).unwrap().count(), 5);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing.ckpt");
    let out = Command::new(env!("CARGO_BIN_EXE_ptta"))
        .args([
            "adapt",
            "--checkpoint",
            p(&missing),
            "--target",
            p(tmp.path()),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = Command::new(env!("CARGO_BIN_EXE_ptta"))
        .args([
            "adapt",
            "--checkpoint",
            "x",
            "--target",
            "y",
            "--lambda",
            "100",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
