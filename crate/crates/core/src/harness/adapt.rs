use std::collections::VecDeque;

use crate::domain::{
    validate_frame, ConfidenceField, Frame, LabelField, ProbabilityField, SelectionMask,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    adam_step, total_loss_and_grad, AdamConfig, LossBreakdown, NetworkParams, ObjectiveInputs,
    OptimizerState, DEFAULT_BETA_HAT, EMBED_DIM,
};
use crate::par::ExecMode;
use crate::prototype::{build_prototypes, fuse_local_global, global_pseudo_labels, PrototypeBank};
use crate::pseudo_label::{run_entropy_baseline, run_lgl_with_table, LocalLabels};
use crate::spatial::{
    features_from_table, match_against_index, SpatialIndex, DEFAULT_K_FEAT, FEATURE_DIM,
};
use crate::temporal::TemporalInputs;

/// Pipeline components that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    /// Neighborhood voting and geometric scoring. Off: raw argmax labels
    /// ranked by prediction certainty alone.
    pub lgl: bool,
    /// Prototype agreement filter. Off: supervise with the selected local labels.
    pub ggf: bool,
    /// Cross-frame consistency term.
    pub tgr: bool,
    /// Confidence weighting of the consistency term.
    pub cw: bool,
    /// Fuse over all local labels instead of the selected subset.
    pub alg: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        lgl: true,
        ggf: true,
        tgr: true,
        cw: true,
        alg: true,
    };

    pub const NONE: Toggles = Toggles {
        lgl: false,
        ggf: false,
        tgr: false,
        cw: false,
        alg: false,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    /// Neighbors per point for voting, excluding the point itself.
    pub k: usize,
    /// Per-class percentile below which pseudo-labels are dropped.
    pub lambda: f64,
    /// Prototype EMA momentum.
    pub alpha: f64,
    /// Frame gap for the consistency term.
    pub window: usize,
    /// Correspondence distance threshold, meters.
    pub tau: f64,
    pub beta_hat: f64,
    pub steps_per_frame: usize,
    pub k_feat: usize,
    pub optimizer: AdamConfig,
    /// Standardize the consistency heads over each frame's paired points.
    pub normalized_heads: bool,
    pub toggles: Toggles,
    pub mode: ExecMode,
}

/// Online learning rate. Adam rescales every update to roughly `lr` no matter
/// how small the gradient is, and the self-training gradients of a well
/// calibrated point-wise network are tiny, so 1e-3 mostly injects drift.
pub const ADAPT_LR: f64 = 5e-5;

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            k: 10,
            lambda: 70.0,
            alpha: 0.99,
            window: 5,
            tau: 0.2,
            beta_hat: DEFAULT_BETA_HAT,
            steps_per_frame: 1,
            k_feat: DEFAULT_K_FEAT,
            optimizer: AdamConfig {
                lr: ADAPT_LR,
                ..AdamConfig::default()
            },
            normalized_heads: true,
            toggles: Toggles::ALL,
            mode: ExecMode::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(0.0..100.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 100), got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.beta_hat) {
            return bad(format!(
                "beta_hat must lie in [0, 1], got {}",
                self.beta_hat
            ));
        }
        if self.k_feat < 3 {
            return bad(format!("k_feat must be >= 3, got {}", self.k_feat));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// One ring-buffer entry.
#[derive(Clone, Debug)]
pub struct BufferedFrame {
    pub frame: Frame,
    pub features: Matrix,
    pub scores: ConfidenceField,
}

/// Intermediate labels of one frame, for inspection.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Argmax of the frozen source model.
    pub source_argmax: LabelField,
    pub local: LocalLabels,
    /// Prototype labels, when the prototype stage ran with a non-empty bank.
    pub global: Option<LabelField>,
    /// Labels actually supervising the segmentation loss.
    pub targets: LabelField,
}

#[derive(Clone, Debug)]
pub struct FrameOutcome {
    /// Prediction of the model adapted up to the previous frame.
    pub eval_pred: LabelField,
    pub pseudo: PseudoLabels,
    /// Loss of each optimizer step, in order.
    pub losses: Vec<LossBreakdown>,
}

/// Everything carried from one frame to the next.
#[derive(Clone, Debug)]
pub struct AdaptationState {
    source: NetworkParams,
    target: NetworkParams,
    optimizer: OptimizerState,
    bank: PrototypeBank,
    buffer: VecDeque<BufferedFrame>,
    config: AdaptationConfig,
}

/// Rejects checkpoints that do not fit the feature extractor or the label set.
pub fn check_checkpoint(params: &NetworkParams, classes: usize) -> Result<()> {
    if params.feature_dim() != FEATURE_DIM {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint expects {} input features, the extractor produces {FEATURE_DIM}",
            params.feature_dim()
        )));
    }
    if params.classes() != classes {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint predicts {} classes, the data has {classes}",
            params.classes()
        )));
    }
    Ok(())
}

struct FrameGeometry {
    index: SpatialIndex,
    features: Matrix,
    /// `k + 1` neighbors per point, self first.
    vote_table: crate::spatial::NeighborTable,
}

impl AdaptationState {
    pub fn new(source: NetworkParams, config: AdaptationConfig) -> Result<Self> {
        config.validate()?;
        let classes = source.classes();
        Ok(AdaptationState {
            target: source.clone(),
            optimizer: OptimizerState::new(&source),
            bank: PrototypeBank::new(classes, EMBED_DIM),
            buffer: VecDeque::with_capacity(config.window),
            source,
            config,
        })
    }

    pub fn source(&self) -> &NetworkParams {
        &self.source
    }

    pub fn target(&self) -> &NetworkParams {
        &self.target
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Drops buffered frames, e.g. when a new sequence starts and poses are
    /// no longer comparable.
    pub fn clear_buffer(&mut self) {
        self.buffer.clear();
    }

    fn geometry(&self, frame: &Frame) -> Result<FrameGeometry> {
        let cfg = &self.config;
        let index = SpatialIndex::build(&frame.points)?;
        let widest = cfg.k_feat.max(cfg.k + 1);
        let table = index.neighbor_table(widest, cfg.mode)?;
        let features = features_from_table(&frame.points, &table.truncated(cfg.k_feat)?, cfg.mode)?;
        let vote_table = table.truncated(cfg.k + 1)?;
        Ok(FrameGeometry {
            index,
            features,
            vote_table,
        })
    }

    /// Prediction of the current target model, without touching any state.
    pub fn predict(&self, frame: &Frame) -> Result<LabelField> {
        validate_frame(frame)?;
        let geo = self.geometry(frame)?;
        Ok(self
            .target
            .forward(&geo.features, self.config.mode)?
            .probs
            .argmax())
    }

    /// Prediction of the frozen source model.
    pub fn predict_source(&self, frame: &Frame) -> Result<LabelField> {
        validate_frame(frame)?;
        let geo = self.geometry(frame)?;
        Ok(self
            .source
            .forward(&geo.features, self.config.mode)?
            .probs
            .argmax())
    }

    /// Evaluates the frame with the current model, then adapts on it.
    pub fn adapt_frame(&mut self, frame: &Frame) -> Result<FrameOutcome> {
        self.adapt_inner(frame).map_err(|e| match e {
            Error::Frame { .. } => e,
            other => Error::Frame {
                frame_id: frame.frame_id,
                source: Box::new(other),
            },
        })
    }

    fn adapt_inner(&mut self, frame: &Frame) -> Result<FrameOutcome> {
        validate_frame(frame)?;
        let cfg = self.config.clone();
        let classes = self.source.classes();
        let geo = self.geometry(frame)?;

        // (1) evaluate before any update
        let target_fwd = self.target.forward(&geo.features, cfg.mode)?;
        let eval_pred = target_fwd.probs.argmax();

        // (2) local labels from the frozen source model
        let source_probs: ProbabilityField = self.source.forward(&geo.features, cfg.mode)?.probs;
        let source_argmax = source_probs.argmax();
        let local = if cfg.toggles.lgl {
            run_lgl_with_table(
                &source_probs,
                &geo.vote_table,
                cfg.lambda,
                classes,
                cfg.mode,
            )?
        } else {
            run_entropy_baseline(&source_probs, cfg.lambda, classes)?
        };
        let selected_labels = local.labels.masked(&local.selected)?;

        // (3) prototypes and fusion
        let (targets, global) = if cfg.toggles.ggf {
            let z = target_fwd.embeddings();
            let fresh = build_prototypes(z, &local.labels, &local.selected, classes)?;
            self.bank.ema_update(&fresh, cfg.alpha)?;
            if self.bank.any_seen() {
                let global = global_pseudo_labels(z, &self.bank, cfg.mode)?;
                let candidates = if cfg.toggles.alg {
                    &local.labels
                } else {
                    &selected_labels
                };
                (fuse_local_global(candidates, &global)?, Some(global))
            } else {
                (LabelField::ignored(frame.len()), None)
            }
        } else {
            (selected_labels, None)
        };

        // (4) consistency against frame t − w
        let previous = if cfg.toggles.tgr && self.buffer.len() == cfg.window {
            self.buffer.front()
        } else {
            None
        };
        let pairs = previous
            .map(|p| match_against_index(&geo.index, &frame.pose, &p.frame, cfg.tau, cfg.mode))
            .transpose()?;

        // (5) optimizer steps
        let mut losses = Vec::with_capacity(cfg.steps_per_frame);
        for _ in 0..cfg.steps_per_frame {
            let temporal = match (previous, &pairs) {
                (Some(p), Some(pairs)) => Some(TemporalInputs {
                    current_features: &geo.features,
                    previous_features: &p.features,
                    pairs,
                    current_scores: &local.scores,
                    previous_scores: &p.scores,
                    confidence_weighted: cfg.toggles.cw,
                    normalized_heads: cfg.normalized_heads,
                }),
                _ => None,
            };
            let inputs = ObjectiveInputs {
                features: &geo.features,
                targets: &targets,
                scores: &local.scores,
                beta_hat: cfg.beta_hat,
                temporal,
            };
            let (loss, grads) = total_loss_and_grad(&self.target, &inputs, cfg.mode)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!("loss is {}", loss.total)));
            }
            adam_step(
                &mut self.target,
                &grads,
                &mut self.optimizer,
                &cfg.optimizer,
            )?;
            losses.push(loss);
        }
        if !self.target.is_finite() {
            return Err(Error::Numerical("parameters became non-finite".into()));
        }

        // (6) remember this frame
        if self.buffer.len() == cfg.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(BufferedFrame {
            frame: frame.clone(),
            features: geo.features,
            scores: local.scores.clone(),
        });

        Ok(FrameOutcome {
            eval_pred,
            pseudo: PseudoLabels {
                source_argmax,
                local,
                global,
                targets,
            },
            losses,
        })
    }
}

/// Selection mask of a label field: true where the label is not IGNORE.
pub fn supervised_mask(labels: &LabelField) -> SelectionMask {
    SelectionMask(labels.iter().map(|l| l.is_some()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Pose;
    use crate::stream::{generate_sequence, SceneConfig, ShiftConfig};

    fn frames(n: usize) -> Vec<Frame> {
        let scene = SceneConfig {
            frames: n,
            ..Default::default()
        };
        generate_sequence(&scene, &ShiftConfig::benchmark_target(1)).unwrap()
    }

    #[test]
    fn frozen_learning_rate_reproduces_source() {
        let source = NetworkParams::init(FEATURE_DIM, 7, 3);
        let cfg = AdaptationConfig {
            toggles: Toggles::NONE,
            optimizer: AdamConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            ..Default::default()
        };
        let mut state = AdaptationState::new(source, cfg).unwrap();
        for f in frames(3) {
            let src = state.predict_source(&f).unwrap();
            assert_eq!(state.adapt_frame(&f).unwrap().eval_pred, src);
        }
    }

    #[test]
    fn first_frames_skip_the_temporal_term() {
        let source = NetworkParams::init(FEATURE_DIM, 7, 3);
        let cfg = AdaptationConfig {
            window: 2,
            ..Default::default()
        };
        let mut state = AdaptationState::new(source, cfg).unwrap();
        for (t, f) in frames(4).iter().enumerate() {
            let out = state.adapt_frame(f).unwrap();
            let pairs = out.losses[0].temporal_pairs.used_pairs;
            if t < 2 {
                assert_eq!(pairs, 0);
                assert_eq!(out.losses[0].temporal, 0.0);
            } else {
                assert!(pairs > 0);
            }
            assert!(state.buffered() <= 2);
        }
    }

    #[test]
    fn evaluation_precedes_the_update() {
        let source = NetworkParams::init(FEATURE_DIM, 7, 5);
        let mut state = AdaptationState::new(source, AdaptationConfig::default()).unwrap();
        for f in frames(3) {
            let dry = state.predict(&f).unwrap();
            assert_eq!(state.adapt_frame(&f).unwrap().eval_pred, dry);
        }
    }

    #[test]
    fn errors_carry_the_frame_id() {
        let source = NetworkParams::init(FEATURE_DIM, 7, 5);
        let mut state = AdaptationState::new(source, AdaptationConfig::default()).unwrap();
        let f = Frame::new(9, vec![[0.0; 3]; 4], Pose::identity());
        assert!(matches!(
            state.adapt_frame(&f),
            Err(Error::Frame { frame_id: 9, .. })
        ));
    }

    #[test]
    fn checkpoint_shape_is_checked() {
        let p = NetworkParams::init(FEATURE_DIM, 7, 0);
        assert!(check_checkpoint(&p, 7).is_ok());
        assert!(matches!(
            check_checkpoint(&p, 3),
            Err(Error::CheckpointMismatch(_))
        ));
        let q = NetworkParams::init(4, 7, 0);
        assert!(matches!(
            check_checkpoint(&q, 7),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        for cfg in [
            AdaptationConfig {
                lambda: 100.0,
                ..Default::default()
            },
            AdaptationConfig {
                alpha: 1.0,
                ..Default::default()
            },
            AdaptationConfig {
                window: 0,
                ..Default::default()
            },
            AdaptationConfig {
                tau: 0.0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
