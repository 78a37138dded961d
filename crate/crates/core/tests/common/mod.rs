//! Dense reference computations shared by the oracle tests. Everything here
//! stacks the full `cn x cn` problem and uses direct inversion, trading
//! cubic-in-`c` cost for independence from the blocked code paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use gpmc_core::ep::PosteriorState;
use gpmc_core::inner::{evaluate_tilted, SiteState};

/// Class-major stacked prior: block diagonal with `c` copies of `k`.
pub fn dense_prior(k: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    let n = k.nrows();
    let mut full = DMatrix::zeros(c * n, c * n);
    for class in 0..c {
        full.view_mut((class * n, class * n), (n, n)).copy_from(k);
    }
    full
}

/// Dense site precision `T = D - D R (R' D R)^{-1} R' D` from stacked
/// per-class precision diagonals (`n x c`).
pub fn dense_site_precision(pi: &DMatrix<f64>, coupled: bool) -> DMatrix<f64> {
    let (n, c) = (pi.nrows(), pi.ncols());
    let d = DVector::from_fn(c * n, |idx, _| pi[(idx % n, idx / n)]);
    if !coupled {
        return DMatrix::from_diagonal(&d);
    }
    let mut dr = DMatrix::zeros(c * n, n);
    for class in 0..c {
        for i in 0..n {
            dr[(class * n + i, i)] = d[class * n + i];
        }
    }
    let mut rtdr_inv = DMatrix::zeros(n, n);
    for i in 0..n {
        let s: f64 = (0..c).map(|class| pi[(i, class)]).sum();
        rtdr_inv[(i, i)] = 1.0 / s;
    }
    DMatrix::from_diagonal(&d) - &dr * rtdr_inv * dr.transpose()
}

pub struct DensePosterior {
    pub cov: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub logdet: f64,
    pub n: usize,
    pub c: usize,
}

/// Dense posterior from the same `(pi, loc)` site parameterization the
/// blocked engine consumes.
pub fn dense_posterior(
    k: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    loc: &DMatrix<f64>,
    coupled: bool,
) -> DensePosterior {
    let (n, c) = (pi.nrows(), pi.ncols());
    let k_full = dense_prior(k, c);
    let t = dense_site_precision(pi, coupled);
    let ikt = DMatrix::identity(c * n, c * n) + &k_full * &t;
    let logdet = ikt.clone().lu().determinant().ln();
    let m = &t * ikt.try_inverse().unwrap();
    let cov = &k_full - &k_full * &m * &k_full;
    let nu = DVector::from_fn(c * n, |idx, _| loc[(idx % n, idx / n)]);
    let mean = &cov * &nu;
    DensePosterior {
        cov,
        mean,
        logdet,
        n,
        c,
    }
}

impl DensePosterior {
    pub fn marginal_mean(&self, i: usize) -> DVector<f64> {
        DVector::from_fn(self.c, |class, _| self.mean[class * self.n + i])
    }

    pub fn marginal_cov(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.c, self.c, |k1, k2| {
            self.cov[(k1 * self.n + i, k2 * self.n + i)]
        })
    }
}

/// Dense evaluation of the EP marginal likelihood from a blocked state:
/// identical cavity and tilted-normalizer assembly, but every marginal,
/// quadratic form, and the determinant comes from the `cn x cn` matrices.
pub fn dense_log_marginal(
    k: &DMatrix<f64>,
    state: &PosteriorState,
    inner_sites: &[SiteState],
    labels: &[usize],
) -> f64 {
    let n = state.num_obs();
    let c = state.num_classes();
    let dense = dense_posterior(k, state.pi(), state.site_location(), state.coupled);
    let mut value = -0.5 * dense.logdet;
    for i in 0..n {
        for class in 0..c {
            value += 0.5 * state.site_location()[(i, class)] * dense.mean[class * n + i];
        }
    }
    for i in 0..n {
        let mean = dense.marginal_mean(i);
        let cov = dense.marginal_cov(i);
        let prec = cov.clone().try_inverse().unwrap();
        let marg_quad = (mean.transpose() * &prec * &mean)[0];
        let marg_logdet = cov.clone().lu().determinant().ln();
        let pi = state.pi().row(i).transpose();
        let big_pi = if state.coupled {
            DMatrix::from_diagonal(&pi) - &pi * pi.transpose() / pi.sum()
        } else {
            DMatrix::from_diagonal(&pi)
        };
        let cav_prec = &prec - big_pi;
        let cav_cov = cav_prec.clone().try_inverse().unwrap();
        let h = &prec * &mean - state.site_location().row(i).transpose();
        let cav_mean = &cav_cov * &h;
        let cav_quad = h.dot(&cav_mean);
        let cav_logdet = cav_cov.clone().lu().determinant().ln();
        let tilted = evaluate_tilted(&cav_mean, &cav_cov, labels[i], &inner_sites[i]).unwrap();
        value += tilted.log_z + 0.5 * (cav_quad + cav_logdet) - 0.5 * (marg_quad + marg_logdet);
    }
    value
}
