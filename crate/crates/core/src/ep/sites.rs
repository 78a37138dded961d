//! Structured outer-EP site parameters.
//!
//! The inner EP's scalar sites induce, for each observation, a `c x c` site
//! precision of the form `Pi = diag(pi) - pi pi' / (1' pi)` and a location
//! vector orthogonal to the ones vector. Both are cheap functions of the
//! inner natural parameters, so the outer loop never stores dense site
//! covariances.

use nalgebra::{DMatrix, DVector};

use crate::inner::SiteState;

/// Outer site of one observation in structured form.
#[derive(Debug, Clone)]
pub struct StructuredSite {
    /// `pi = E_{-y} tau + e_y`: per-class precision diagonal.
    pub pi: DVector<f64>,
    /// Natural location, orthogonal to the ones vector.
    pub nu: DVector<f64>,
    /// Observed label.
    pub label: usize,
}

/// Expands inner site precisions into `(pi, Pi)`.
///
/// `tau` holds the `c-1` inner precisions in ascending class order skipping
/// `label`; all entries must be non-negative.
pub fn site_precision(tau: &[f64], label: usize) -> (DVector<f64>, DMatrix<f64>) {
    let c = tau.len() + 1;
    let mut pi = DVector::zeros(c);
    pi[label] = 1.0;
    let mut s = 0;
    for j in 0..c {
        if j != label {
            pi[j] = tau[s];
            s += 1;
        }
    }
    let total: f64 = pi.sum();
    assert!(total > 0.0, "site precision mass must be positive");
    let big_pi = DMatrix::from_diagonal(&pi) - &pi * pi.transpose() / total;
    (pi, big_pi)
}

/// Site location `nu_full = a * pi - E_{-y} nu` with
/// `a = (1' nu) / (1' pi)`; always orthogonal to the ones vector.
pub fn site_location(tau: &[f64], nu: &[f64], label: usize) -> DVector<f64> {
    let c = tau.len() + 1;
    let (pi, _) = site_precision(tau, label);
    let a = nu.iter().sum::<f64>() / pi.sum();
    let mut out = &pi * a;
    let mut s = 0;
    for j in 0..c {
        if j != label {
            out[j] -= nu[s];
            s += 1;
        }
    }
    out
}

impl StructuredSite {
    /// Builds the structured site from inner natural parameters.
    pub fn from_inner(site: &SiteState, label: usize) -> Self {
        let (pi, _) = site_precision(&site.tau, label);
        let nu = site_location(&site.tau, &site.nu, label);
        Self { pi, nu, label }
    }

    /// Dense `c x c` site precision `Pi`.
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi) - &self.pi * self.pi.transpose() / self.pi.sum()
    }
}
