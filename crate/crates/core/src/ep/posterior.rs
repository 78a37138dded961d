//! Factorized EP posterior state.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::structured::BlockPosterior;

use super::sites::StructuredSite;

/// The EP posterior in its blocked representation: per-class factors of
/// `A = I + D^{1/2} K D^{1/2}`, the coupling factor of `P`, and the derived
/// per-observation marginals. Refreshing from the same sites is
/// deterministic.
pub struct PosteriorState {
    pub(crate) block: BlockPosterior,
    /// Whether between-class couplings are kept (full EP) or dropped (IEP).
    pub coupled: bool,
}

impl PosteriorState {
    pub fn num_obs(&self) -> usize {
        self.block.n
    }

    pub fn num_classes(&self) -> usize {
        self.block.c
    }

    /// Marginal posterior mean of observation `i`.
    pub fn marginal_mean(&self, i: usize) -> DVector<f64> {
        self.block.mean.row(i).transpose()
    }

    /// Marginal posterior covariance of observation `i` (`c x c`).
    pub fn marginal_cov(&self, i: usize) -> DMatrix<f64> {
        self.block.marginal_cov(i)
    }

    /// All marginal means as an `n x c` matrix.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.block.mean
    }

    /// Marginal variances as an `n x c` matrix.
    pub fn variances(&self) -> &DMatrix<f64> {
        &self.block.marg_var
    }

    /// `log |I + K T|` for the current sites.
    pub fn logdet(&self) -> f64 {
        self.block.logdet
    }

    /// Stacked site precision diagonals (`n x c`).
    pub fn pi(&self) -> &DMatrix<f64> {
        &self.block.pi
    }

    /// Stacked site locations (`n x c`).
    pub fn site_location(&self) -> &DMatrix<f64> {
        &self.block.loc
    }
}

/// Builds the posterior from structured (coupled) sites.
pub fn refresh_posterior(k_eff: &DMatrix<f64>, sites: &[StructuredSite]) -> Result<PosteriorState> {
    let n = sites.len();
    let c = sites[0].pi.len();
    let mut pi = DMatrix::zeros(n, c);
    let mut loc = DMatrix::zeros(n, c);
    for (i, s) in sites.iter().enumerate() {
        for class in 0..c {
            pi[(i, class)] = s.pi[class];
            loc[(i, class)] = s.nu[class];
        }
    }
    Ok(PosteriorState {
        block: BlockPosterior::build(k_eff, &pi, &loc, true)?,
        coupled: true,
    })
}

/// Builds the posterior from diagonal (independent) sites: per-class
/// precisions `tau` and locations `nu`, both `n x c`.
pub fn refresh_posterior_independent(
    k_eff: &DMatrix<f64>,
    tau: &DMatrix<f64>,
    nu: &DMatrix<f64>,
) -> Result<PosteriorState> {
    Ok(PosteriorState {
        block: BlockPosterior::build(k_eff, tau, nu, false)?,
        coupled: false,
    })
}
