//! Prior precision (penalty) matrices, generalized log-determinants and the
//! discrete anisotropy grid used for tensor-product smooths.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below `RANK_RTOL * lambda_max` count as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Default inverse-gamma hyperparameters for smoothing variances.
pub const DEFAULT_IG_A: f64 = 1.0;
pub const DEFAULT_IG_B: f64 = 0.001;

/// Default diagonal jitter for weakly identified blocks.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Number of points in the default anisotropy grid spanning `[0.05, 0.95]`.
pub const DEFAULT_OMEGA_GRID: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    MonotoneFirstDiff,
    Rw2,
    Identity,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub dim: usize,
    pub a: f64,
    pub b: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, dim: usize) -> Self {
        PenaltySpec {
            kind,
            dim,
            a: DEFAULT_IG_A,
            b: DEFAULT_IG_B,
        }
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self.kind {
            PenaltyKind::MonotoneFirstDiff => monotone_first_diff(self.dim),
            PenaltyKind::Rw2 => rw2_penalty(self.dim),
            PenaltyKind::Identity => Ok(identity_penalty(self.dim)),
            PenaltyKind::Zero => Ok(zero_penalty(self.dim)),
        }
    }

    /// Analytic rank for the kind.
    pub fn rank(&self) -> usize {
        match self.kind {
            PenaltyKind::MonotoneFirstDiff | PenaltyKind::Rw2 => self.dim.saturating_sub(2),
            PenaltyKind::Identity => self.dim,
            PenaltyKind::Zero => 0,
        }
    }
}

/// `D^T D` with `D` the `(d-2) x d` stencil `D[i, i+1] = 1, D[i, i+2] = -1`.
///
/// Penalizes differences between consecutive exponentiated increments; the
/// first (intercept) coefficient is untouched.
pub fn monotone_first_diff(dim: usize) -> Result<DMatrix<f64>> {
    if dim < 3 {
        return Err(Error::Dimension(format!(
            "monotone first-difference penalty needs dimension >= 3, got {dim}"
        )));
    }
    let d = DMatrix::from_fn(dim - 2, dim, |i, j| {
        if j == i + 1 {
            1.0
        } else if j == i + 2 {
            -1.0
        } else {
            0.0
        }
    });
    Ok(d.transpose() * d)
}

/// Second-order random-walk precision `Δ2^T Δ2`.
pub fn rw2_penalty(dim: usize) -> Result<DMatrix<f64>> {
    if dim < 3 {
        return Err(Error::Dimension(format!(
            "second-order random walk needs dimension >= 3, got {dim}"
        )));
    }
    let d = DMatrix::from_fn(dim - 2, dim, |i, j| match j.wrapping_sub(i) {
        0 => 1.0,
        1 => -2.0,
        2 => 1.0,
        _ => 0.0,
    });
    Ok(d.transpose() * d)
}

pub fn identity_penalty(dim: usize) -> DMatrix<f64> {
    DMatrix::identity(dim, dim)
}

pub fn zero_penalty(dim: usize) -> DMatrix<f64> {
    DMatrix::zeros(dim, dim)
}

/// `omega (K1 ⊗ I) + (1 - omega) (I ⊗ K2)`.
pub fn tensor_precision(k1: &DMatrix<f64>, k2: &DMatrix<f64>, omega: f64) -> Result<DMatrix<f64>> {
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::Domain(format!("anisotropy must lie in (0, 1), got {omega}")));
    }
    let i1 = DMatrix::identity(k1.nrows(), k1.nrows());
    let i2 = DMatrix::identity(k2.nrows(), k2.nrows());
    Ok(k1.kronecker(&i2) * omega + i1.kronecker(k2) * (1.0 - omega))
}

fn check_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::Domain("precision matrix must be square".into()));
    }
    let scale = k.amax().max(1.0);
    for i in 0..k.nrows() {
        for j in 0..i {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Domain(format!(
                    "precision matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Sum of logs and count of eigenvalues above the relative tolerance.
fn gdet_from_eigenvalues(eigenvalues: impl Iterator<Item = f64> + Clone) -> (f64, usize) {
    let max = eigenvalues.clone().fold(0.0f64, |m, v| m.max(v));
    if max <= 0.0 {
        return (0.0, 0);
    }
    let cut = RANK_RTOL * max;
    eigenvalues
        .filter(|&v| v > cut)
        .fold((0.0, 0), |(s, r), v| (s + v.ln(), r + 1))
}

fn eigenvalues(k: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_symmetric(k)?;
    Ok(SymmetricEigen::new(k.clone()).eigenvalues)
}

/// Log generalized determinant: sum of log nonzero eigenvalues.
pub fn log_gdet(k: &DMatrix<f64>) -> Result<f64> {
    Ok(gdet_from_eigenvalues(eigenvalues(k)?.iter().copied()).0)
}

pub fn rank(k: &DMatrix<f64>) -> Result<usize> {
    Ok(gdet_from_eigenvalues(eigenvalues(k)?.iter().copied()).1)
}

/// Discrete grid over the anisotropy parameter with precomputed
/// generalized determinants of the tensor precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyGrid {
    pub omega: Vec<f64>,
    pub log_gdet: Vec<f64>,
    pub rank: Vec<usize>,
    pub log_prior: Vec<f64>,
}

impl AnisotropyGrid {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Index of the grid point nearest to the middle.
    pub fn midpoint(&self) -> usize {
        (self.len() - 1) / 2
    }
}

/// `size` equidistant points from 0.05 to 0.95; a single point sits at 0.5.
pub fn default_omega_values(size: usize) -> Vec<f64> {
    match size {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => {
            let step = 0.9 / (size - 1) as f64;
            (0..size).map(|j| 0.05 + step * j as f64).collect()
        }
    }
}

/// Builds the grid from the Kronecker eigenvalue-sum identity: the spectrum
/// of the tensor precision is `{omega l_i + (1 - omega) m_j}`.
pub fn build_anisotropy_grid(k1: &DMatrix<f64>, k2: &DMatrix<f64>, size: usize) -> Result<AnisotropyGrid> {
    build_anisotropy_grid_on(k1, k2, &default_omega_values(size))
}

pub fn build_anisotropy_grid_on(k1: &DMatrix<f64>, k2: &DMatrix<f64>, omega: &[f64]) -> Result<AnisotropyGrid> {
    if omega.is_empty() || omega.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
        return Err(Error::Domain("anisotropy grid must lie strictly inside (0, 1)".into()));
    }
    let l1 = eigenvalues(k1)?;
    let l2 = eigenvalues(k2)?;
    let mut log_gdet = Vec::with_capacity(omega.len());
    let mut ranks = Vec::with_capacity(omega.len());
    for &w in omega {
        let pairs = l1
            .iter()
            .flat_map(|&a| l2.iter().map(move |&b| w * a + (1.0 - w) * b));
        let (ld, r) = gdet_from_eigenvalues(pairs);
        log_gdet.push(ld);
        ranks.push(r);
    }
    let log_prior = vec![-(omega.len() as f64).ln(); omega.len()];
    Ok(AnisotropyGrid {
        omega: omega.to_vec(),
        log_gdet,
        rank: ranks,
        log_prior,
    })
}

/// `x^T K x`.
pub fn quad_form(k: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for j in 0..n {
        let col = k.column(j);
        let mut inner = 0.0;
        for i in 0..n {
            inner += col[i] * x[i];
        }
        s += inner * x[j];
    }
    s
}
