//! `ptta`: generate synthetic streams, pretrain a source model, adapt it
//! online to a target stream and score the result.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ptta_core::domain::ClassMap;
use ptta_core::harness::{
    check_checkpoint, run_ablation, run_tta_sequences_with_model, AdaptationConfig,
    ConfusionMatrix, RunOptions, RunReport, Toggles,
};
use ptta_core::model::{checkpoint, pretrain_source, PretrainConfig};
use ptta_core::stream::{
    generate_sequence, list_records, parse_config, read_label_file, read_sequence_with_map,
    write_label_files, write_sequence, SceneConfig, ShiftConfig,
};
use ptta_core::ExecMode;

#[derive(Parser)]
#[command(
    name = "ptta",
    version,
    about = "Streaming test-time adaptation for LiDAR segmentation"
)]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence directory.
    Generate(GenerateArgs),
    /// Train a source checkpoint on labelled sequences.
    Pretrain(PretrainArgs),
    /// Adapt a source checkpoint online and report per-frame IoU.
    Adapt(AdaptArgs),
    /// Score a directory of predicted `.label` files against ground truth.
    Eval(EvalArgs),
    /// Run the cumulative component ladder.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// key=value scene and shift configuration; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the shift seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Labelled source sequence directories.
    #[arg(long = "source", required = true, num_args = 1..)]
    sources: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long, value_enum, default_value_t = LabelMap::Canonical)]
    label_map: LabelMap,
}

#[derive(Args, Clone)]
struct AdaptFlags {
    /// Neighbors aggregated per point, excluding the point itself.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Per-class percentile below which local labels are dropped.
    #[arg(long, default_value_t = 70.0)]
    lambda: f64,
    /// Prototype EMA momentum.
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    /// Frame gap of the temporal consistency term.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Correspondence distance threshold, meters.
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = ptta_core::harness::ADAPT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    wd: f64,
    /// Use coupled (L2) weight decay instead of decoupled.
    #[arg(long)]
    coupled_wd: bool,
    #[arg(long, default_value_t = 0.3)]
    beta_hat: f64,
    #[arg(long, default_value_t = 1)]
    steps_per_frame: usize,
    /// Accepted for symmetry with the other subcommands; adaptation itself
    /// draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_lgl: bool,
    #[arg(long)]
    no_ggf: bool,
    #[arg(long)]
    no_tgr: bool,
    #[arg(long)]
    no_cw: bool,
    #[arg(long)]
    no_alg: bool,
    #[arg(long, value_enum, default_value_t = LabelMap::Canonical)]
    label_map: LabelMap,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target sequence directories, processed in order.
    #[arg(long = "target", required = true, num_args = 1..)]
    targets: Vec<PathBuf>,
    /// Carry the adapted model across sequences instead of restarting.
    #[arg(long)]
    continual: bool,
    /// Per-frame CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write evaluated predictions as `.label` files into this directory.
    #[arg(long)]
    dump_pred: Option<PathBuf>,
    /// Also write the adapted checkpoint.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: AdaptFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Sequence directory holding the ground-truth `.label` files.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = LabelMap::Canonical)]
    label_map: LabelMap,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Directory for one CSV report per rung.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: AdaptFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMap {
    /// Raw ids equal the seven canonical class ids.
    Canonical,
    /// SemanticKITTI learning ids.
    SemanticKitti,
    /// nuScenes lidarseg ids.
    Nuscenes,
    /// SynLiDAR ids.
    Synlidar,
}

impl LabelMap {
    fn class_map(self) -> ClassMap {
        match self {
            LabelMap::Canonical => ClassMap::canonical_identity(),
            LabelMap::SemanticKitti => ClassMap::semantic_kitti(),
            LabelMap::Nuscenes => ClassMap::nuscenes(),
            LabelMap::Synlidar => ClassMap::synlidar(),
        }
    }
}

impl AdaptFlags {
    fn config(&self, mode: ExecMode) -> Result<AdaptationConfig> {
        let mut cfg = AdaptationConfig {
            k: self.k,
            lambda: self.lambda,
            alpha: self.alpha,
            window: self.window,
            tau: self.tau,
            beta_hat: self.beta_hat,
            steps_per_frame: self.steps_per_frame,
            toggles: Toggles {
                lgl: !self.no_lgl,
                ggf: !self.no_ggf,
                tgr: !self.no_tgr,
                cw: !self.no_cw,
                alg: !self.no_alg,
            },
            mode,
            ..AdaptationConfig::default()
        };
        cfg.optimizer.lr = self.lr;
        cfg.optimizer.weight_decay = self.wd;
        cfg.optimizer.decoupled = !self.coupled_wd;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pretrain(a) => pretrain(a, mode),
        Command::Adapt(a) => adapt(a, mode),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, mode),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (mut scene, mut shift) = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text)?
        }
        None => (SceneConfig::default(), ShiftConfig::none(0)),
    };
    if let Some(seed) = a.seed {
        shift.seed = seed;
    }
    if let Some(n) = a.frames {
        scene.frames = n;
    }
    let frames = generate_sequence(&scene, &shift)?;
    write_sequence(&frames, &a.out)?;
    let points: usize = frames.iter().map(|f| f.len()).sum();
    println!(
        "wrote {} frames ({} points) to {}",
        frames.len(),
        points,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs, mode: ExecMode) -> Result<()> {
    let map = a.label_map.class_map();
    let mut frames = Vec::new();
    for dir in &a.sources {
        frames.extend(read_sequence_with_map(dir, &map)?);
    }
    let mut cfg = PretrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        mode,
        ..PretrainConfig::default()
    };
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(wd) = a.wd {
        cfg.optimizer.weight_decay = wd;
    }
    let report = pretrain_source(&frames, map.classes(), &cfg)?;
    checkpoint::save(&report.params, &a.out)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {e}: loss {l:.5}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_source(path: &Path, map: &ClassMap) -> Result<ptta_core::model::NetworkParams> {
    let source = checkpoint::load(path)?;
    check_checkpoint(&source, map.classes())?;
    Ok(source)
}

fn print_report(report: &RunReport) {
    println!("{}", report.to_table());
    if let Some(gain) = report.improvement() {
        println!(
            "cumulative mIoU {:.2} ({gain:+.2} over source)",
            report.miou_points()
        );
    }
}

fn adapt(a: AdaptArgs, mode: ExecMode) -> Result<()> {
    let map = a.flags.label_map.class_map();
    let cfg = a.flags.config(mode)?;
    let source = load_source(&a.checkpoint, &map)?;
    let sequences = a
        .targets
        .iter()
        .map(|d| read_sequence_with_map(d, &map))
        .collect::<ptta_core::Result<Vec<_>>>()?;
    let opts = RunOptions {
        keep_predictions: a.dump_pred.is_some(),
    };
    let (mut report, adapted) =
        run_tta_sequences_with_model(&sequences, &source, &cfg, a.continual, opts)?;
    report.class_names = map.names().to_vec();
    print_report(&report);
    if let Some(path) = &a.report {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &a.dump_pred {
        write_label_files(&report.predictions, dir, &map)?;
    }
    if let Some(path) = &a.save_checkpoint {
        checkpoint::save(&adapted, path)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let map = a.label_map.class_map();
    let gt_dir = if a.gt.join("labels").is_dir() {
        a.gt.join("labels")
    } else {
        a.gt.clone()
    };
    let preds = list_records(&a.pred, "label")?;
    if preds.is_empty() {
        bail!("no .label files in {}", a.pred.display());
    }
    let mut total = ConfusionMatrix::new(map.classes());
    for (id, path) in &preds {
        let gt_path = gt_dir.join(path.file_name().expect("listed files have names"));
        if !gt_path.is_file() {
            bail!("frame {id}: no ground truth at {}", gt_path.display());
        }
        let pred = read_label_file(path, &map)?;
        let gt = read_label_file(&gt_path, &map)?;
        total.add(&pred, &gt)?;
    }
    let iou = total.iou();
    for (name, v) in map.names().iter().zip(&iou.per_class) {
        match v {
            Some(x) => println!("{name:12} {:6.2}", 100.0 * x),
            None => println!("{name:12}      -"),
        }
    }
    println!("{:12} {:6.2}", "mIoU", 100.0 * iou.miou);
    Ok(())
}

fn ablate(a: AblateArgs, mode: ExecMode) -> Result<()> {
    let map = a.flags.label_map.class_map();
    let cfg = a.flags.config(mode)?;
    let source = load_source(&a.checkpoint, &map)?;
    let frames = read_sequence_with_map(&a.target, &map)?;
    let rungs = run_ablation(&frames, &source, &cfg)?;
    if let Some(dir) = &a.report_dir {
        fs::create_dir_all(dir)?;
    }
    println!("{:6} {:>7} {:>7}", "rung", "mIoU", "gain");
    for (name, report) in &rungs {
        println!(
            "{name:6} {:7.2} {:+7.2}",
            report.miou_points(),
            report.improvement().unwrap_or(f64::NAN)
        );
        if let Some(dir) = &a.report_dir {
            let file = format!("{}.csv", name.trim_start_matches('+').to_lowercase());
            fs::write(dir.join(file), report.to_csv())?;
        }
    }
    Ok(())
}
