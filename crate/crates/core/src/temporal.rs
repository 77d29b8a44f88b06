//! Confidence-weighted symmetric negative-cosine consistency between matched
//! points of two frames.
//!
//! For a pair `(i, j)` between the current frame and an earlier one, the
//! predictor output of each side is pulled toward the encoder output of the
//! other side. Encoder outputs are targets only: they are computed once and
//! receive no gradient.

use crate::domain::ConfidenceField;
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::model::{Gradients, NetworkParams};
use crate::par::ExecMode;
use crate::spatial::CorrespondenceSet;

const MIN_NORM: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `−w · cos(q, z)` and its gradient with respect to `q` only.
pub fn negative_cosine(q: &[f64], z: &[f64], weight: f64) -> Result<(f64, Vec<f64>)> {
    check_len(q.len(), z.len())?;
    let (nq, nz) = (norm(q), norm(z));
    if nq <= MIN_NORM {
        return Err(Error::DegenerateVector(nq));
    }
    if nz <= MIN_NORM {
        return Err(Error::DegenerateVector(nz));
    }
    let cos = q.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (nq * nz);
    let grad = q
        .iter()
        .zip(z)
        .map(|(&qk, &zk)| -weight * (zk / (nz * nq) - cos * qk / (nq * nq)))
        .collect();
    Ok((-weight * cos, grad))
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalInputs<'a> {
    pub current_features: &'a Matrix,
    pub previous_features: &'a Matrix,
    pub pairs: &'a CorrespondenceSet,
    pub current_scores: &'a ConfidenceField,
    pub previous_scores: &'a ConfidenceField,
    /// When off, every pair term has unit weight.
    pub confidence_weighted: bool,
    /// Standardize head activations over the paired rows of each frame.
    pub normalized_heads: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TemporalLoss {
    pub value: f64,
    pub used_pairs: usize,
    pub skipped_pairs: usize,
}

/// Encoder outputs for the paired rows of both frames, row `k` belonging to
/// pair `k`. These are the stop-gradient targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalTargets {
    pub current: Matrix,
    pub previous: Matrix,
}

fn pair_rows(inputs: &TemporalInputs) -> Result<(Vec<usize>, Vec<usize>)> {
    check_len(inputs.current_scores.len(), inputs.current_features.rows())?;
    check_len(
        inputs.previous_scores.len(),
        inputs.previous_features.rows(),
    )?;
    let cur: Vec<usize> = inputs.pairs.pairs.iter().map(|p| p.current).collect();
    let prev: Vec<usize> = inputs.pairs.pairs.iter().map(|p| p.previous).collect();
    let bad = cur.iter().any(|&i| i >= inputs.current_features.rows())
        || prev.iter().any(|&j| j >= inputs.previous_features.rows());
    if bad {
        return Err(Error::ShapeMismatch("pair index outside its frame".into()));
    }
    Ok((cur, prev))
}

pub fn temporal_targets(
    params: &NetworkParams,
    inputs: &TemporalInputs,
    mode: ExecMode,
) -> Result<TemporalTargets> {
    let (cur, prev) = pair_rows(inputs)?;
    let project = |features: &Matrix, rows: &[usize]| -> Result<Matrix> {
        let trunk = params.forward(&features.select_rows(rows), mode)?;
        Ok(params
            .forward_heads(trunk.embeddings(), inputs.normalized_heads, mode)
            .proj)
    };
    Ok(TemporalTargets {
        current: project(inputs.current_features, &cur)?,
        previous: project(inputs.previous_features, &prev)?,
    })
}

/// Pair terms on pair-aligned rows. Returns the loss and the gradients on
/// `pred_current` and `pred_previous`.
pub fn pair_terms(
    pred_current: &Matrix,
    pred_previous: &Matrix,
    targets: &TemporalTargets,
    weights_current: &[f64],
    weights_previous: &[f64],
) -> Result<(TemporalLoss, Matrix, Matrix)> {
    let n = pred_current.rows();
    check_len(pred_previous.rows(), n)?;
    check_len(targets.current.rows(), n)?;
    check_len(targets.previous.rows(), n)?;
    let d = pred_current.cols();
    let mut g_cur = Matrix::zeros(n, d);
    let mut g_prev = Matrix::zeros(n, d);
    let mut loss = TemporalLoss::default();
    let mut used = Vec::with_capacity(n);
    for k in 0..n {
        // current prediction vs earlier target, weighted by the earlier confidence
        let fwd = negative_cosine(
            pred_current.row(k),
            targets.previous.row(k),
            weights_previous[k],
        );
        let bwd = negative_cosine(
            pred_previous.row(k),
            targets.current.row(k),
            weights_current[k],
        );
        match (fwd, bwd) {
            (Ok((v1, g1)), Ok((v2, g2))) => {
                loss.value += 0.5 * v1 + 0.5 * v2;
                g_cur.row_mut(k).copy_from_slice(&g1);
                g_prev.row_mut(k).copy_from_slice(&g2);
                used.push(k);
            }
            (Err(Error::DegenerateVector(_)), _) | (_, Err(Error::DegenerateVector(_))) => {
                loss.skipped_pairs += 1;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    loss.used_pairs = used.len();
    if loss.skipped_pairs > 0 {
        log::debug!(
            "temporal term skipped {} degenerate pairs",
            loss.skipped_pairs
        );
    }
    if loss.used_pairs > 0 {
        let s = 1.0 / loss.used_pairs as f64;
        loss.value *= s;
        for &k in &used {
            for v in g_cur.row_mut(k).iter_mut().chain(g_prev.row_mut(k)) {
                *v *= 0.5 * s;
            }
        }
    }
    Ok((loss, g_cur, g_prev))
}

/// Temporal loss with targets taken from `params` itself.
pub fn temporal_loss(
    params: &NetworkParams,
    inputs: &TemporalInputs,
    grads: Option<&mut Gradients>,
    mode: ExecMode,
) -> Result<TemporalLoss> {
    if inputs.pairs.is_empty() {
        return Ok(TemporalLoss::default());
    }
    let targets = temporal_targets(params, inputs, mode)?;
    temporal_loss_against(params, inputs, &targets, grads, mode)
}

/// Temporal loss against fixed targets. Gradients (when requested) flow
/// through the predictor branch of both frames only.
pub fn temporal_loss_against(
    params: &NetworkParams,
    inputs: &TemporalInputs,
    targets: &TemporalTargets,
    grads: Option<&mut Gradients>,
    mode: ExecMode,
) -> Result<TemporalLoss> {
    let (cur, prev) = pair_rows(inputs)?;
    if cur.is_empty() {
        return Ok(TemporalLoss::default());
    }
    let trunk_cur = params.forward(&inputs.current_features.select_rows(&cur), mode)?;
    let trunk_prev = params.forward(&inputs.previous_features.select_rows(&prev), mode)?;
    let heads_cur = params.forward_heads(trunk_cur.embeddings(), inputs.normalized_heads, mode);
    let heads_prev = params.forward_heads(trunk_prev.embeddings(), inputs.normalized_heads, mode);

    let (w_cur, w_prev): (Vec<f64>, Vec<f64>) = if inputs.confidence_weighted {
        (
            cur.iter().map(|&i| inputs.current_scores.0[i]).collect(),
            prev.iter().map(|&j| inputs.previous_scores.0[j]).collect(),
        )
    } else {
        (vec![1.0; cur.len()], vec![1.0; prev.len()])
    };
    let (loss, g_cur, g_prev) =
        pair_terms(&heads_cur.pred, &heads_prev.pred, targets, &w_cur, &w_prev)?;

    if let Some(grads) = grads {
        if loss.used_pairs > 0 {
            let dz_cur = params.backward_heads(&heads_cur.cache, &g_cur, grads, mode);
            params.backward_trunk(&trunk_cur.cache, None, Some(&dz_cur), grads, mode);
            let dz_prev = params.backward_heads(&heads_prev.cache, &g_prev, grads, mode);
            params.backward_trunk(&trunk_prev.cache, None, Some(&dz_prev), grads, mode);
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::Correspondence;

    #[test]
    fn cosine_examples() {
        let (v, _) = negative_cosine(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        let (v, _) = negative_cosine(&[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap();
        assert_eq!(v, 0.0);
        let (v, g) = negative_cosine(&[1.0, 2.0], &[-4.0, 1.0], 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(matches!(
            negative_cosine(&[0.0, 0.0], &[1.0, 0.0], 1.0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let q = [0.3, -1.2, 0.7];
        let z = [1.1, 0.4, -0.2];
        let (_, g) = negative_cosine(&q, &z, 0.8).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut a = q;
            let mut b = q;
            a[k] += h;
            b[k] -= h;
            let fd = (negative_cosine(&a, &z, 0.8).unwrap().0
                - negative_cosine(&b, &z, 0.8).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    fn model_gradient_check(normalized_heads: bool) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let net = NetworkParams::init(9, 3, 5);
        let mut random = |n: usize| {
            let data = (0..n * 9).map(|_| rng.gen_range(-1.5..1.5)).collect();
            Matrix::from_vec(n, 9, data)
        };
        let (fc, fp) = (random(12), random(10));
        let sc = ConfidenceField((0..12).map(|i| 0.2 + 0.05 * i as f64).collect());
        let sp = ConfidenceField((0..10).map(|i| 0.9 - 0.06 * i as f64).collect());
        let pairs = CorrespondenceSet {
            pairs: (0..8)
                .map(|k| Correspondence {
                    current: k + 2,
                    previous: (3 * k) % 10,
                    distance: 0.1,
                })
                .collect(),
        };
        let inputs = TemporalInputs {
            current_features: &fc,
            previous_features: &fp,
            pairs: &pairs,
            current_scores: &sc,
            previous_scores: &sp,
            confidence_weighted: true,
            normalized_heads,
        };
        let mode = ExecMode::Sequential;
        let targets = temporal_targets(&net, &inputs, mode).unwrap();
        let mut g = net.zero_grads();
        temporal_loss_against(&net, &inputs, &targets, Some(&mut g), mode).unwrap();
        let analytic: Vec<f64> = g.values().copied().collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = net.clone();
                *p.layers.values_mut().nth(k).unwrap() += delta;
                temporal_loss_against(&p, &inputs, &targets, None, mode)
                    .unwrap()
                    .value
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((fd - a).abs() / (fd.abs().max(a.abs()).max(1e-6)));
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn model_gradient_matches_differences() {
        model_gradient_check(false);
    }

    #[test]
    fn normalized_heads_gradient_matches_differences() {
        model_gradient_check(true);
    }

    #[test]
    fn empty_pairs_are_free() {
        let net = NetworkParams::init(9, 3, 0);
        let f = Matrix::zeros(4, 9);
        let s = ConfidenceField::ones(4);
        let pairs = CorrespondenceSet::default();
        let inputs = TemporalInputs {
            current_features: &f,
            previous_features: &f,
            pairs: &pairs,
            current_scores: &s,
            previous_scores: &s,
            confidence_weighted: true,
            normalized_heads: true,
        };
        let mut g = net.zero_grads();
        let loss = temporal_loss(&net, &inputs, Some(&mut g), ExecMode::Sequential).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(g.is_zero());
    }

    #[test]
    fn aligned_identity_heads_give_minus_one() {
        // pred rows equal target rows everywhere
        let rows = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.3, 0.9]]);
        let targets = TemporalTargets {
            current: rows.clone(),
            previous: rows.clone(),
        };
        let (loss, _, _) = pair_terms(&rows, &rows, &targets, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((loss.value + 1.0).abs() < 1e-15);
        assert_eq!(loss.used_pairs, 2);
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let pred = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let targets = TemporalTargets {
            current: Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]),
            previous: Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]),
        };
        let (loss, _, g_prev) = pair_terms(&pred, &pred, &targets, &[1.0; 2], &[1.0; 2]).unwrap();
        assert_eq!((loss.used_pairs, loss.skipped_pairs), (1, 1));
        assert!((loss.value + 1.0).abs() < 1e-15);
        assert!(g_prev.row(1).iter().all(|&v| v == 0.0));
    }

    /// Two-branch toy: `q = A·x`, `z = B·x`. The term's value depends on B,
    /// but its gradient with respect to B is zero.
    #[test]
    fn stop_gradient_partition() {
        let x = [0.4, -0.7, 1.3];
        let a = [[0.2, -0.5, 0.9], [1.1, 0.3, -0.4]];
        let b = [[-0.6, 0.8, 0.1], [0.5, 0.5, -0.2]];
        let mat = |m: &[[f64; 3]; 2]| -> [f64; 2] {
            [0, 1].map(|r| m[r].iter().zip(&x).map(|(w, v)| w * v).sum())
        };
        let value = |a: &[[f64; 3]; 2], b: &[[f64; 3]; 2]| {
            let q = Matrix::from_rows(&[mat(a).to_vec()]);
            let z = Matrix::from_rows(&[mat(b).to_vec()]);
            let t = TemporalTargets {
                current: z.clone(),
                previous: z,
            };
            let (l, gq, _) = pair_terms(&q, &q, &t, &[0.7], &[0.7]).unwrap();
            (l.value, gq)
        };
        let (v0, gq) = value(&a, &b);
        // analytic gradient: A receives gq ⊗ x, B receives nothing by construction
        let grad_a: Vec<f64> = (0..6).map(|k| gq.get(0, k / 3) * x[k % 3]).collect();
        let mut b2 = b;
        b2[0][0] += 0.1;
        let (v1, _) = value(&a, &b2);
        assert!((v1 - v0).abs() > 1e-6, "z branch must change the value");
        let h = 1e-6;
        for k in 0..6 {
            let mut ap = a;
            let mut am = a;
            ap[k / 3][k % 3] += h;
            am[k / 3][k % 3] -= h;
            // only the q side moves; the same frozen targets stay in place
            let fd = (value(&ap, &b).0 - value(&am, &b).0) / (2.0 * h);
            // pair_terms splits the term half/half between the two q rows
            assert!((fd - 2.0 * grad_a[k]).abs() < 1e-7, "{fd} vs {}", grad_a[k]);
        }
    }

    #[test]
    fn bad_pair_index() {
        let net = NetworkParams::init(9, 3, 0);
        let f = Matrix::zeros(2, 9);
        let s = ConfidenceField::ones(2);
        let pairs = CorrespondenceSet {
            pairs: vec![Correspondence {
                current: 5,
                previous: 0,
                distance: 0.0,
            }],
        };
        let inputs = TemporalInputs {
            current_features: &f,
            previous_features: &f,
            pairs: &pairs,
            current_scores: &s,
            previous_scores: &s,
            confidence_weighted: true,
            normalized_heads: true,
        };
        assert!(temporal_loss(&net, &inputs, None, ExecMode::Sequential).is_err());
    }
}
