//! Cumulative-sum/exponential reparameterization that keeps a
//! transformation function strictly increasing along the response direction.
//!
//! A block of `D = D1 * D2` coefficients is laid out `d1`-major, i.e. entry
//! `(d1, d2)` sits at `d1 * D2 + d2`. Coefficients with `d1 >= 1` (0-based)
//! are exponentiated and then accumulated along `d1` for every fixed `d2`:
//! `gamma = (Sigma_{D1} ⊗ I_{D2}) beta_tilde`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Exponentiated coefficients beyond this value are treated as overflow.
pub const EXP_OVERFLOW_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotoneMap {
    pub d1: usize,
    pub d2: usize,
}

impl MonotoneMap {
    pub fn new(d1: usize, d2: usize) -> Self {
        assert!(d1 >= 1 && d2 >= 1, "monotone block needs positive dimensions");
        MonotoneMap { d1, d2 }
    }

    pub fn dim(&self) -> usize {
        self.d1 * self.d2
    }

    pub fn is_exponentiated(&self, index: usize) -> bool {
        index >= self.d2
    }

    /// True if any exponentiated entry would overflow.
    pub fn overflows(&self, beta: &[f64]) -> bool {
        beta[self.d2..].iter().any(|&b| !(b <= EXP_OVERFLOW_LIMIT))
    }

    pub fn beta_tilde(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.dim());
        beta.iter()
            .enumerate()
            .map(|(i, &b)| if self.is_exponentiated(i) { b.exp() } else { b })
            .collect()
    }

    /// `gamma = Sigma beta_tilde` by strided cumulative sums.
    pub fn gamma_from_beta(&self, beta: &[f64]) -> Vec<f64> {
        let mut gamma = vec![0.0; self.dim()];
        self.gamma_into(beta, &mut gamma);
        gamma
    }

    pub fn gamma_into(&self, beta: &[f64], gamma: &mut [f64]) {
        let d2 = self.d2;
        gamma[..d2].copy_from_slice(&beta[..d2]);
        for i in d2..self.dim() {
            gamma[i] = gamma[i - d2] + beta[i].exp();
        }
    }

    /// Diagonal of `C`: one for copied entries, `exp(beta_d)` otherwise.
    pub fn jacobian_diag(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .enumerate()
            .map(|(i, &b)| if self.is_exponentiated(i) { b.exp() } else { 1.0 })
            .collect()
    }

    /// Maps a gradient with respect to `gamma` to one with respect to
    /// `beta`: `C Sigma^T g`, with `Sigma^T` as reverse strided sums.
    pub fn pullback_into(&self, beta: &[f64], grad_gamma: &[f64], grad_beta: &mut [f64]) {
        let d2 = self.d2;
        let dim = self.dim();
        for i in (0..dim).rev() {
            let tail = if i + d2 < dim { grad_beta[i + d2] } else { 0.0 };
            grad_beta[i] = grad_gamma[i] + tail;
        }
        // grad_beta now holds Sigma^T g; apply C
        for i in d2..dim {
            grad_beta[i] *= beta[i].exp();
        }
    }
}

/// Dense `Sigma_{D1} ⊗ I_{D2}`; the cumulative-sum routines never build it.
pub fn sigma_matrix(d1: usize, d2: usize) -> DMatrix<f64> {
    let lower = DMatrix::from_fn(d1, d1, |k, l| if k >= l { 1.0 } else { 0.0 });
    lower.kronecker(&DMatrix::identity(d2, d2))
}
