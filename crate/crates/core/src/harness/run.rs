use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::domain::{ClassMap, Frame, LabelField};
use crate::error::{Error, Result};
use crate::model::{checkpoint, LossBreakdown, NetworkParams};
use crate::stream::read_sequence_with_map;

use super::adapt::{check_checkpoint, AdaptationConfig, AdaptationState, Toggles};
use super::metrics::{ConfusionMatrix, IouResult};

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub iou: IouResult,
    /// Wall time of the frame's predict/adapt call, seconds.
    pub time_s: f64,
    pub selected: usize,
    pub supervised: usize,
    pub loss: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub class_names: Vec<String>,
    pub frames: Vec<FrameRecord>,
    /// IoU over all frames pooled.
    pub cumulative: IouResult,
    /// Pooled IoU of the frozen source model on the same frames.
    pub baseline: Option<IouResult>,
    pub config: String,
    /// Evaluated predictions, kept when requested.
    pub predictions: Vec<(u32, LabelField)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub keep_predictions: bool,
}

impl RunReport {
    /// Cumulative mIoU in percentage points.
    pub fn miou_points(&self) -> f64 {
        100.0 * self.cumulative.miou
    }

    /// Gain over the source model in mIoU percentage points.
    pub fn improvement(&self) -> Option<f64> {
        self.baseline
            .as_ref()
            .map(|b| 100.0 * (self.cumulative.miou - b.miou))
    }

    fn csv(&self, with_time: bool) -> String {
        let mut out = String::from("frame");
        for c in 0..self.class_names.len() {
            let _ = write!(out, ",class{c}_iou");
        }
        out.push_str(",mIoU");
        if with_time {
            out.push_str(",time_s");
        }
        out.push('\n');
        let fmt = |v: f64| {
            if v.is_nan() {
                "nan".to_string()
            } else {
                v.to_string()
            }
        };
        for f in &self.frames {
            let _ = write!(out, "{}", f.frame_id);
            for v in &f.iou.per_class {
                let _ = write!(out, ",{}", v.map_or("nan".to_string(), fmt));
            }
            let _ = write!(out, ",{}", fmt(f.iou.miou));
            if with_time {
                let _ = write!(out, ",{}", f.time_s);
            }
            out.push('\n');
        }
        out
    }

    /// Per-frame rows: `frame,class0_iou,…,mIoU,time_s`.
    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The CSV without the timing column; identical across repeated runs.
    pub fn metrics_csv(&self) -> String {
        self.csv(false)
    }

    pub fn mean_frame_time(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(|f| f.time_s).sum::<f64>() / self.frames.len() as f64
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Vec<String>)> = Vec::new();
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut push = |name: &str, r: &IouResult| {
            let mut cells: Vec<String> = r.per_class.iter().map(|v| cell(*v)).collect();
            cells.push(cell(Some(r.miou).filter(|v| !v.is_nan())));
            rows.push((name.to_string(), cells));
        };
        if let Some(b) = &self.baseline {
            push("source-only", b);
        }
        push("adapted", &self.cumulative);
        if let Some(b) = &self.baseline {
            let deltas: Vec<String> = self
                .cumulative
                .per_class
                .iter()
                .zip(&b.per_class)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => format!("{:+.2}", 100.0 * (a - b)),
                    _ => "-".into(),
                })
                .chain(std::iter::once(format!(
                    "{:+.2}",
                    self.improvement().unwrap_or(0.0)
                )))
                .collect();
            rows.push(("gain".into(), deltas));
        }
        let mut header: Vec<String> = self.class_names.clone();
        header.push("mIoU".into());
        let first = rows
            .iter()
            .map(|r| r.0.chars().count())
            .max()
            .unwrap_or(0)
            .max(3);
        let widths: Vec<usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| {
                rows.iter()
                    .map(|r| r.1[i].chars().count())
                    .max()
                    .unwrap_or(0)
                    .max(h.chars().count())
            })
            .collect();
        let line = |l: &str, m: &str, r: &str| {
            let mut s = format!("{l}{}", "─".repeat(first + 2));
            for w in &widths {
                s.push_str(m);
                s.push_str(&"─".repeat(w + 2));
            }
            s.push_str(r);
            s.push('\n');
            s
        };
        let mut out = line("┌", "┬", "┐");
        let _ = write!(out, "│ {:first$} ", "");
        for (h, w) in header.iter().zip(&widths) {
            let _ = write!(out, "│ {h:>w$} ");
        }
        out.push_str("│\n");
        out.push_str(&line("├", "┼", "┤"));
        for (name, cells) in &rows {
            let _ = write!(out, "│ {name:first$} ");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "│ {c:>w$} ");
            }
            out.push_str("│\n");
        }
        out.push_str(&line("└", "┴", "┘"));
        let _ = writeln!(
            out,
            "{} frames, mean {:.3} s per frame",
            self.frames.len(),
            self.mean_frame_time()
        );
        out
    }
}

fn gt_of(frame: &Frame) -> Result<&LabelField> {
    frame
        .gt_labels
        .as_ref()
        .ok_or(Error::NoGroundTruth(frame.frame_id))
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == crate::domain::CANONICAL_CLASSES.len() {
        crate::domain::CANONICAL_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        (0..classes).map(|c| format!("class{c}")).collect()
    }
}

/// Streams `sequences` through one adaptation state. Without `continual`,
/// the state is rebuilt from the source model for each sequence; with it,
/// only the frame buffer is cleared at sequence boundaries.
pub fn run_tta_sequences(
    sequences: &[Vec<Frame>],
    source: &NetworkParams,
    cfg: &AdaptationConfig,
    continual: bool,
    opts: RunOptions,
) -> Result<RunReport> {
    run_tta_sequences_with_model(sequences, source, cfg, continual, opts).map(|(r, _)| r)
}

/// As [`run_tta_sequences`], also returning the final adapted parameters.
pub fn run_tta_sequences_with_model(
    sequences: &[Vec<Frame>],
    source: &NetworkParams,
    cfg: &AdaptationConfig,
    continual: bool,
    opts: RunOptions,
) -> Result<(RunReport, NetworkParams)> {
    let classes = source.classes();
    let mut state = AdaptationState::new(source.clone(), cfg.clone())?;
    let mut adapted = ConfusionMatrix::new(classes);
    let mut baseline = ConfusionMatrix::new(classes);
    let mut frames = Vec::new();
    let mut predictions = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        if s > 0 {
            if continual {
                state.clear_buffer();
            } else {
                state = AdaptationState::new(source.clone(), cfg.clone())?;
            }
        }
        for frame in seq {
            let gt = gt_of(frame)?;
            let start = Instant::now();
            let out = state.adapt_frame(frame)?;
            let time_s = start.elapsed().as_secs_f64();
            let mut cm = ConfusionMatrix::new(classes);
            cm.add(&out.eval_pred, gt)?;
            adapted.merge(&cm);
            baseline.add(&out.pseudo.source_argmax, gt)?;
            frames.push(FrameRecord {
                frame_id: frame.frame_id,
                iou: cm.iou(),
                time_s,
                selected: out.pseudo.local.selected.count(),
                supervised: out.pseudo.targets.supervised_count(),
                loss: out.losses.last().copied(),
            });
            log::debug!(
                "frame {}: mIoU {:.4}, {} supervised, {:.3} s",
                frame.frame_id,
                cm.iou().miou,
                out.pseudo.targets.supervised_count(),
                time_s
            );
            if opts.keep_predictions {
                predictions.push((frame.frame_id, out.eval_pred));
            }
        }
    }
    let report = RunReport {
        class_names: class_names(classes),
        frames,
        cumulative: adapted.iou(),
        baseline: Some(baseline.iou()),
        config: format!("{cfg:?} continual={continual}"),
        predictions,
    };
    Ok((report, state.target().clone()))
}

pub fn run_tta(
    frames: &[Frame],
    source: &NetworkParams,
    cfg: &AdaptationConfig,
    opts: RunOptions,
) -> Result<RunReport> {
    run_tta_sequences(&[frames.to_vec()], source, cfg, false, opts)
}

/// Evaluates the frozen source model alone.
pub fn run_source_only(
    frames: &[Frame],
    source: &NetworkParams,
    cfg: &AdaptationConfig,
    opts: RunOptions,
) -> Result<RunReport> {
    let classes = source.classes();
    let state = AdaptationState::new(source.clone(), cfg.clone())?;
    let mut total = ConfusionMatrix::new(classes);
    let mut records = Vec::with_capacity(frames.len());
    let mut predictions = Vec::new();
    for frame in frames {
        let gt = gt_of(frame)?;
        let start = Instant::now();
        let pred = state.predict_source(frame).map_err(|e| Error::Frame {
            frame_id: frame.frame_id,
            source: Box::new(e),
        })?;
        let time_s = start.elapsed().as_secs_f64();
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&pred, gt)?;
        total.merge(&cm);
        records.push(FrameRecord {
            frame_id: frame.frame_id,
            iou: cm.iou(),
            time_s,
            selected: 0,
            supervised: 0,
            loss: None,
        });
        if opts.keep_predictions {
            predictions.push((frame.frame_id, pred));
        }
    }
    Ok(RunReport {
        class_names: class_names(classes),
        frames: records,
        cumulative: total.iou(),
        baseline: None,
        config: "source-only".into(),
        predictions,
    })
}

/// Loads a checkpoint and a sequence directory and runs adaptation.
pub fn run_tta_dir(
    sequence_dir: &Path,
    checkpoint_path: &Path,
    map: &ClassMap,
    cfg: &AdaptationConfig,
    opts: RunOptions,
) -> Result<RunReport> {
    let source = checkpoint::load(checkpoint_path)?;
    check_checkpoint(&source, map.classes())?;
    let frames = read_sequence_with_map(sequence_dir, map)?;
    run_tta(&frames, &source, cfg, opts)
}

/// Cumulative component ladder: local labels, then adding the consistency
/// term, prototype filtering, confidence weighting and all-label fusion.
pub fn ablation_ladder() -> Vec<(&'static str, Toggles)> {
    let mut t = Toggles {
        lgl: true,
        ..Toggles::NONE
    };
    let mut out = vec![("LGL", t)];
    t.tgr = true;
    out.push(("+TGR", t));
    t.ggf = true;
    out.push(("+GGF", t));
    t.cw = true;
    out.push(("+CW", t));
    t.alg = true;
    out.push(("+ALG", t));
    out
}

pub fn run_ablation(
    frames: &[Frame],
    source: &NetworkParams,
    cfg: &AdaptationConfig,
) -> Result<Vec<(&'static str, RunReport)>> {
    ablation_ladder()
        .into_iter()
        .map(|(name, toggles)| {
            let cfg = AdaptationConfig {
                toggles,
                ..cfg.clone()
            };
            Ok((name, run_tta(frames, source, &cfg, RunOptions::default())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::FEATURE_DIM;
    use crate::stream::{generate_sequence, SceneConfig, ShiftConfig};

    fn frames() -> Vec<Frame> {
        let scene = SceneConfig {
            frames: 3,
            ..Default::default()
        };
        generate_sequence(&scene, &ShiftConfig::none(2)).unwrap()
    }

    #[test]
    fn report_shapes() {
        let source = NetworkParams::init(FEATURE_DIM, 7, 1);
        let fs = frames();
        let report = run_tta(
            &fs,
            &source,
            &AdaptationConfig::default(),
            RunOptions {
                keep_predictions: true,
            },
        )
        .unwrap();
        assert_eq!(report.frames.len(), 3);
        assert_eq!(report.predictions.len(), 3);
        let csv = report.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "frame,class0_iou,class1_iou,class2_iou,class3_iou,class4_iou,class5_iou,class6_iou,mIoU,time_s"
        );
        assert_eq!(csv.lines().count(), 4);
        assert!(report.to_table().contains("mIoU"));
        // the pooled source row matches a separate source-only run
        let src = run_source_only(
            &fs,
            &source,
            &AdaptationConfig::default(),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(report.baseline.as_ref().unwrap(), &src.cumulative);
    }

    #[test]
    fn ladder_is_cumulative() {
        let l = ablation_ladder();
        assert_eq!(l.len(), 5);
        assert_eq!(l[4].1, Toggles::ALL);
        assert!(!l[0].1.tgr && !l[0].1.ggf);
    }
}
