use nalgebra::{Matrix3, SymmetricEigen};

use crate::domain::Point;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, ExecMode};

use super::{NeighborTable, SpatialIndex};

/// Width of the per-point geometric descriptor.
pub const FEATURE_DIM: usize = 9;

/// Default neighborhood size for covariance features.
pub const DEFAULT_K_FEAT: usize = 16;

const DEGENERATE_EIGEN: f64 = 1e-12;
const MIN_VOLUME: f64 = 1e-9;

/// Column order of the descriptor.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "x",
    "y",
    "z",
    "range",
    "height",
    "linearity",
    "planarity",
    "scattering",
    "density",
];

/// Per-point descriptor: coordinates, range, height, covariance shape
/// features and neighborhood density.
pub fn local_geometric_features(
    points: &[Point],
    index: &SpatialIndex,
    k_feat: usize,
    mode: ExecMode,
) -> Result<Matrix> {
    if k_feat < 3 {
        return Err(Error::ConfigInvalid(format!(
            "k_feat must be >= 3, got {k_feat}"
        )));
    }
    let table = index.neighbor_table(k_feat, mode)?;
    features_from_table(points, &table, mode)
}

pub(crate) fn features_from_table(
    points: &[Point],
    table: &NeighborTable,
    mode: ExecMode,
) -> Result<Matrix> {
    let k = table.k();
    if table.len() != points.len() {
        return Err(Error::LengthMismatch {
            left: table.len(),
            right: points.len(),
        });
    }
    let mut out = Matrix::zeros(points.len(), FEATURE_DIM);
    par::fill_rows(out.data_mut(), FEATURE_DIM, mode, |i, row| {
        let p = points[i];
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
        row[3] = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        row[4] = p[2];

        let nbrs = table.indices(i);
        let [l1, l2, l3] = covariance_eigenvalues(points, nbrs);
        if l1 >= DEGENERATE_EIGEN {
            row[5] = (l1 - l2) / l1;
            row[6] = (l2 - l3) / l1;
            row[7] = l3 / l1;
        }
        let radius = table.distances(i)[k - 1];
        let volume = (4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)).max(MIN_VOLUME);
        row[8] = k as f64 / volume;
    });
    Ok(out)
}

/// Eigenvalues of the neighborhood covariance, sorted descending and clamped at 0.
fn covariance_eigenvalues(points: &[Point], nbrs: &[usize]) -> [f64; 3] {
    let n = nbrs.len() as f64;
    let mut mean = [0.0; 3];
    for &j in nbrs {
        for a in 0..3 {
            mean[a] += points[j][a];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix3::zeros();
    for &j in nbrs {
        let d = [
            points[j][0] - mean[0],
            points[j][1] - mean[1],
            points[j][2] - mean[2],
        ];
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    cov /= n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0], ev[1], ev[2]]
}
