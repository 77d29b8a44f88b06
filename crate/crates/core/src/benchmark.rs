//! The seeded synthetic benchmark: a source model trained on clean scenes and
//! a shifted target stream over a held-out scene.

use crate::domain::{Frame, CANONICAL_CLASSES};
use crate::error::Result;
use crate::model::{pretrain_source, NetworkParams, PretrainConfig, PretrainReport};
use crate::stream::{generate_sequence, SceneConfig, ShiftConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    /// Scene seeds of the labelled source sequences.
    pub source_scenes: Vec<u64>,
    pub source_frames: usize,
    /// Keep every n-th source frame for training.
    pub source_stride: usize,
    pub pretrain: PretrainConfig,
    pub target_scene: u64,
    pub target_frames: usize,
    pub target_shift: ShiftConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            source_scenes: vec![101, 102, 103, 104],
            source_frames: 40,
            source_stride: 4,
            pretrain: PretrainConfig {
                epochs: 20,
                ..PretrainConfig::default()
            },
            target_scene: 7,
            target_frames: 200,
            target_shift: ShiftConfig::benchmark_target(42),
        }
    }
}

impl BenchmarkConfig {
    pub fn target_scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.target_scene,
            frames: self.target_frames,
            ..SceneConfig::default()
        }
    }

    /// Labelled clean frames from the source scenes.
    pub fn source_frames(&self) -> Result<Vec<Frame>> {
        let mut out = Vec::new();
        for &seed in &self.source_scenes {
            let scene = SceneConfig {
                seed,
                frames: self.source_frames,
                ..SceneConfig::default()
            };
            let frames = generate_sequence(&scene, &ShiftConfig::none(seed))?;
            out.extend(frames.into_iter().step_by(self.source_stride.max(1)));
        }
        Ok(out)
    }

    pub fn pretrain(&self) -> Result<PretrainReport> {
        pretrain_source(
            &self.source_frames()?,
            CANONICAL_CLASSES.len(),
            &self.pretrain,
        )
    }

    pub fn source_model(&self) -> Result<NetworkParams> {
        Ok(self.pretrain()?.params)
    }

    /// The shifted target stream.
    pub fn target_frames(&self) -> Result<Vec<Frame>> {
        generate_sequence(&self.target_scene(), &self.target_shift)
    }

    /// The target scene sampled like the source domain, with its own
    /// sampling seed.
    pub fn unshifted_frames(&self) -> Result<Vec<Frame>> {
        generate_sequence(
            &self.target_scene(),
            &ShiftConfig::none(self.target_shift.seed),
        )
    }
}
