//! Runs the synthetic benchmark end to end: pretraining, source-only and
//! adapted runs on the shifted stream, the component ladder and the
//! unshifted control.
//!
//! `cargo run --release --example golden [checkpoint]` reuses the checkpoint
//! when it exists and writes it otherwise.

use std::path::PathBuf;
use std::time::Instant;

use ptta_core::benchmark::BenchmarkConfig;
use ptta_core::harness::{
    label_accuracy, run_ablation, run_tta, AdaptationConfig, AdaptationState, RunOptions,
};
use ptta_core::model::checkpoint;

fn main() -> ptta_core::Result<()> {
    env_logger::init();
    let bench = BenchmarkConfig::default();
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ptta-golden.ckpt"));
    let source = if path.exists() {
        checkpoint::load(&path)?
    } else {
        let t = Instant::now();
        let report = bench.pretrain()?;
        println!(
            "pretrain {:.1}s, epoch losses {:?}",
            t.elapsed().as_secs_f64(),
            report.epoch_losses
        );
        checkpoint::save(&report.params, &path)?;
        report.params
    };
    let cfg = AdaptationConfig::default();
    let target = bench.target_frames()?;

    let t = Instant::now();
    let run = run_tta(&target, &source, &cfg, RunOptions::default())?;
    println!("{}", run.to_table());
    println!(
        "full run {:.1}s, gain {:+.2}",
        t.elapsed().as_secs_f64(),
        run.improvement().unwrap()
    );

    let mut state = AdaptationState::new(source.clone(), cfg.clone())?;
    let mut worst = (f64::INFINITY, f64::INFINITY);
    for f in &target {
        let gt = f.gt_labels.as_ref().unwrap();
        let out = state.adapt_frame(f)?;
        let p = &out.pseudo;
        let fused = label_accuracy(&p.targets, gt)?.unwrap_or(1.0);
        let local = label_accuracy(&p.local.labels, gt)?.unwrap_or(0.0);
        let sel = p.local.labels.masked(&p.local.selected)?;
        let raw = p.source_argmax.masked(&p.local.selected)?;
        let sel_acc = label_accuracy(&sel, gt)?.unwrap_or(1.0);
        let raw_acc = label_accuracy(&raw, gt)?.unwrap_or(0.0);
        worst.0 = worst.0.min(fused - local);
        worst.1 = worst.1.min(sel_acc - raw_acc);
    }
    println!(
        "fusion margin min {:.4}, selection margin min {:.4}",
        worst.0, worst.1
    );

    for (name, r) in run_ablation(&target, &source, &cfg)? {
        println!(
            "{name:6} {:.2} ({:+.2})",
            r.miou_points(),
            r.improvement().unwrap()
        );
    }
    let clean = bench.unshifted_frames()?;
    let control = run_tta(&clean, &source, &cfg, RunOptions::default())?;
    println!(
        "unshifted: source {:.2}, adapted {:.2}, change {:+.2}",
        100.0 * control.baseline.as_ref().unwrap().miou,
        control.miou_points(),
        control.improvement().unwrap()
    );
    Ok(())
}
