//! Supervised source training of the segmentation trunk.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{ConfidenceField, Frame, Label, LabelField};
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::par::ExecMode;
use crate::spatial::{local_geometric_features, SpatialIndex, DEFAULT_K_FEAT, FEATURE_DIM};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::loss::soft_dice_loss;
use super::network::NetworkParams;

const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub k_feat: usize,
    /// Draw every minibatch with an equal share of each class present.
    pub class_balanced: bool,
    /// Scale the learning rate linearly from `lr` down to `lr / epochs`.
    pub linear_decay: bool,
    pub optimizer: AdamConfig,
    pub mode: ExecMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            seed: 0,
            batch_size: 512,
            k_feat: DEFAULT_K_FEAT,
            class_balanced: true,
            linear_decay: false,
            // strong decay keeps the logits from saturating, so confidence
            // scores stay ordered instead of rounding to exactly 1
            optimizer: AdamConfig {
                lr: 3e-3,
                weight_decay: 0.05,
                ..AdamConfig::default()
            },
            mode: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub params: NetworkParams,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-column mean and standard deviation over all rows.
pub fn feature_statistics(features: &[Matrix]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n: usize = features.iter().map(Matrix::rows).sum();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = features[0].cols();
    let mut mean = vec![0.0; d];
    for m in features {
        check_len(m.cols(), d)?;
        for r in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; d];
    for m in features {
        for r in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let scale = var
        .into_iter()
        .map(|v| (v / n as f64).sqrt().max(MIN_SCALE))
        .collect();
    Ok((mean, scale))
}

/// Computes features for labelled source frames and trains on them.
pub fn pretrain_source(
    frames: &[Frame],
    classes: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let mut features = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    for frame in frames {
        let gt = frame
            .gt_labels
            .as_ref()
            .ok_or(Error::NoGroundTruth(frame.frame_id))?;
        let index = SpatialIndex::build(&frame.points)?;
        features.push(local_geometric_features(
            &frame.points,
            &index,
            cfg.k_feat,
            cfg.mode,
        )?);
        labels.push(gt.clone());
    }
    pretrain_on_features(&features, &labels, classes, cfg)
}

/// Minibatch Adam on the segmentation loss with unit confidence.
pub fn pretrain_on_features(
    features: &[Matrix],
    labels: &[LabelField],
    classes: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    check_len(features.len(), labels.len())?;
    if cfg.batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be positive".into()));
    }
    let mut params = NetworkParams::init(FEATURE_DIM, classes, cfg.seed);
    let (mean, scale) = feature_statistics(features)?;
    params.input_mean = mean;
    params.input_scale = scale;

    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (f, (m, l)) in features.iter().zip(labels).enumerate() {
        check_len(m.rows(), l.len())?;
        l.validate(classes)?;
        rows.extend(
            (0..m.rows())
                .filter(|&r| l.get(r).is_some())
                .map(|r| (f, r)),
        );
    }
    if rows.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptyInput);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = OptimizerState::new(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut step_cfg = cfg.optimizer;
        if cfg.linear_decay {
            step_cfg.lr *= (cfg.epochs - epoch) as f64 / cfg.epochs as f64;
        }
        let order = if cfg.class_balanced {
            balanced_order(&rows, labels, classes, &mut rng)
        } else {
            let mut r = rows.clone();
            r.shuffle(&mut rng);
            r
        };
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Matrix::zeros(batch.len(), FEATURE_DIM);
            let mut y: Vec<Label> = Vec::with_capacity(batch.len());
            for (b, &(f, r)) in batch.iter().enumerate() {
                x.row_mut(b).copy_from_slice(features[f].row(r));
                y.push(labels[f].get(r));
            }
            let forward = params.forward(&x, cfg.mode)?;
            let loss = soft_dice_loss(
                &forward.probs,
                &LabelField(y),
                &ConfidenceField::ones(batch.len()),
                0.0,
            )?;
            let mut grads = params.zero_grads();
            params.backward_trunk(
                &forward.cache,
                Some(&loss.grad_logits),
                None,
                &mut grads,
                cfg.mode,
            );
            adam_step(&mut params, &grads, &mut state, &step_cfg)?;
            sum += loss.value;
            batches += 1;
        }
        let mean_loss = sum / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {mean_loss:.4}");
        epoch_losses.push(mean_loss);
    }
    Ok(PretrainReport {
        params,
        epoch_losses,
    })
}

/// One epoch of row ids in which the classes present take turns, each class
/// cycling through its own shuffled rows. The epoch has as many rows as the
/// data set.
fn balanced_order(
    rows: &[(usize, usize)],
    labels: &[LabelField],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for &(f, r) in rows {
        if let Some(c) = labels[f].get(r) {
            per_class[c].push((f, r));
        }
    }
    per_class.retain(|v| !v.is_empty());
    for v in &mut per_class {
        v.shuffle(rng);
    }
    let mut cursor = vec![0usize; per_class.len()];
    let mut out = Vec::with_capacity(rows.len());
    'fill: loop {
        for (c, pool) in per_class.iter_mut().enumerate() {
            if out.len() == rows.len() {
                break 'fill;
            }
            if cursor[c] == pool.len() {
                pool.shuffle(rng);
                cursor[c] = 0;
            }
            out.push(pool[cursor[c]]);
            cursor[c] += 1;
        }
    }
    out
}
