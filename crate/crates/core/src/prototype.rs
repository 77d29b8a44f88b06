//! Per-class embedding prototypes and local/global label fusion.

use crate::domain::{ClassId, LabelField, SelectionMask, IGNORE};
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, ExecMode};

const MIN_NORM: f64 = 1e-12;

/// Centroids of the selected embeddings of one frame, per class.
#[derive(Clone, Debug, PartialEq)]
pub struct FreshCentroids {
    pub centroids: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

pub fn build_prototypes(
    z: &Matrix,
    labels: &LabelField,
    selected: &SelectionMask,
    classes: usize,
) -> Result<FreshCentroids> {
    check_len(z.rows(), labels.len())?;
    check_len(z.rows(), selected.len())?;
    labels.validate(classes)?;
    let d = z.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..z.rows() {
        if !selected.0[i] {
            continue;
        }
        if let Some(c) = labels.get(i) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(mut s, &n)| {
            (n > 0).then(|| {
                for v in &mut s {
                    *v /= n as f64;
                }
                s
            })
        })
        .collect();
    Ok(FreshCentroids { centroids, counts })
}

/// EMA-maintained class prototypes over target-model embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    dim: usize,
    prototypes: Vec<f64>,
    seen: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize) -> Self {
        PrototypeBank {
            classes,
            dim,
            prototypes: vec![0.0; classes * dim],
            seen: vec![false; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, c: ClassId) -> Option<&[f64]> {
        self.seen[c].then(|| &self.prototypes[c * self.dim..(c + 1) * self.dim])
    }

    pub fn is_seen(&self, c: ClassId) -> bool {
        self.seen[c]
    }

    pub fn any_seen(&self) -> bool {
        self.seen.iter().any(|&s| s)
    }

    /// `ρ̂ ← α ρ̂ + (1 − α) ρ` for classes present in `fresh`; a class seen for
    /// the first time is initialized with its fresh centroid.
    pub fn ema_update(&mut self, fresh: &FreshCentroids, alpha: f64) -> Result<()> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::ConfigInvalid(format!("alpha {alpha} outside [0,1)")));
        }
        check_len(fresh.centroids.len(), self.classes)?;
        for (c, centroid) in fresh.centroids.iter().enumerate() {
            let Some(rho) = centroid else { continue };
            check_len(rho.len(), self.dim)?;
            let slot = &mut self.prototypes[c * self.dim..(c + 1) * self.dim];
            if self.seen[c] {
                for (p, &r) in slot.iter_mut().zip(rho) {
                    *p = alpha * *p + (1.0 - alpha) * r;
                }
            } else {
                slot.copy_from_slice(rho);
                self.seen[c] = true;
            }
        }
        Ok(())
    }

    /// Flat little-endian record: `C: u32, D: u32, C seen bytes, C×D f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.classes + 8 * self.prototypes.len());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend(self.seen.iter().map(|&s| s as u8));
        for v in &self.prototypes {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::BadCheckpoint(format!("prototype bank: {why}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let classes = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + classes + 8 * classes * dim;
        if bytes.len() != expected {
            return Err(bad(&format!("{} bytes, expected {expected}", bytes.len())));
        }
        let seen = bytes[8..8 + classes]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad("seen flag is not 0/1")),
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes: Vec<f64> = bytes[8 + classes..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite prototype"));
        }
        Ok(PrototypeBank {
            classes,
            dim,
            prototypes,
            seen,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Nearest prototype by cosine similarity over seen classes, ties to the
/// smallest class id. Zero-norm embeddings get IGNORE.
pub fn global_pseudo_labels(
    z: &Matrix,
    bank: &PrototypeBank,
    mode: ExecMode,
) -> Result<LabelField> {
    if !bank.any_seen() {
        return Err(Error::NoSeenClasses);
    }
    if z.cols() != bank.dim {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {} vs prototype width {}",
            z.cols(),
            bank.dim
        )));
    }
    let protos: Vec<(ClassId, Vec<f64>)> = (0..bank.classes)
        .filter_map(|c| {
            let p = bank.prototype(c)?;
            let n = norm(p);
            (n > MIN_NORM).then(|| (c, p.iter().map(|v| v / n).collect()))
        })
        .collect();
    let labels = par::map_indexed(z.rows(), mode, |i| {
        let row = z.row(i);
        let n = norm(row);
        if n <= MIN_NORM {
            return IGNORE;
        }
        let mut best: Option<(ClassId, f64)> = None;
        for (c, p) in &protos {
            let cos = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / n;
            if best.is_none_or(|(_, b)| cos > b) {
                best = Some((*c, cos));
            }
        }
        best.map(|(c, _)| c)
    });
    Ok(LabelField(labels))
}

/// Keeps a local label only where the global label agrees with it.
pub fn fuse_local_global(local: &LabelField, global: &LabelField) -> Result<LabelField> {
    check_len(local.len(), global.len())?;
    Ok(LabelField(
        local
            .iter()
            .zip(global.iter())
            .map(|(l, g)| match (l, g) {
                (Some(a), Some(b)) if a == b => Some(a),
                _ => IGNORE,
            })
            .collect(),
    ))
}
