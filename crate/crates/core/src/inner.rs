//! Inner EP over the probit factors of one augmented tilted distribution.
//!
//! For one observation with label `y` and a `c`-dimensional Gaussian cavity,
//! the tilted distribution is extended by the probit auxiliary variable `u`
//! into a `(c+1)`-dimensional Gaussian times `c-1` probit factors, each
//! acting on a linear projection of the augmented vector. EP with scalar
//! Gaussian sites on those projections yields the normalizer, mean, and
//! covariance needed by the outer loop, with no numerical quadrature.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::normal::{gauss_cdf_ratio, log_norm_cdf};

/// Inner-loop convergence tolerance on the largest natural-parameter change.
pub const INNER_TOL: f64 = 1e-8;

/// Cap on inner sweeps when running to convergence.
pub const MAX_INNER_SWEEPS: usize = 50;

/// Natural parameters of the `c-1` scalar probit sites of one observation,
/// ordered by ascending class index skipping the observation's own label.
/// Zero vectors encode an uninitialized (vacuous) state.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteState {
    /// Site precisions, kept non-negative.
    pub tau: Vec<f64>,
    /// Site locations.
    pub nu: Vec<f64>,
}

impl SiteState {
    pub fn vacuous(num_classes: usize) -> Self {
        Self {
            tau: vec![0.0; num_classes - 1],
            nu: vec![0.0; num_classes - 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tau.iter().chain(self.nu.iter()).all(|v| v.is_finite())
    }
}

/// Moments of one tilted distribution.
#[derive(Debug, Clone)]
pub struct TiltedResult {
    /// Log normalizer of the tilted distribution (EP estimate).
    pub log_z: f64,
    /// Tilted mean of the `c` latent values.
    pub mean: DVector<f64>,
    /// Tilted covariance of the `c` latent values.
    pub cov: DMatrix<f64>,
    /// Sites whose cavity variance was non-positive and were skipped in the
    /// last sweep.
    pub skipped_sites: usize,
    /// Number of sweeps actually executed.
    pub sweeps_run: usize,
}

/// Scalar probit moment match: moments of `Φ(x) N(x | m, v)`.
///
/// Returns `(log Ẑ, m̂, v̂)` where `Ẑ` is the normalizer and `(m̂, v̂)` the
/// tilted mean and variance. Stable for arbitrarily negative `m / sqrt(v)`.
pub fn probit_site_moments(cavity_mean: f64, cavity_var: f64) -> Result<(f64, f64, f64)> {
    if !cavity_var.is_finite() || !cavity_mean.is_finite() || cavity_var <= 0.0 {
        return Err(Error::InvalidCavity(format!(
            "scalar cavity mean {cavity_mean}, var {cavity_var}"
        )));
    }
    let s = 1.0 / (1.0 + cavity_var).sqrt();
    let z = cavity_mean * s;
    let log_z = log_norm_cdf(z);
    let (ratio, ratio_plus_z) = gauss_cdf_ratio(z);
    let rho = ratio * s;
    let mean = cavity_mean + rho * cavity_var;
    // gamma = rho^2 + z*rho*s = s^2 * ratio * (ratio + z)
    let gamma = s * s * ratio * ratio_plus_z;
    let var = cavity_var * (1.0 - cavity_var * gamma);
    if !var.is_finite() || var <= 0.0 {
        return Err(Error::InvalidCavity(format!(
            "tilted variance collapsed ({var}) at z = {z}"
        )));
    }
    Ok((log_z, mean, var))
}

/// The augmented Gaussian base measure of one tilted distribution: the
/// cavity extended with the unit-variance auxiliary coordinate, plus the
/// probit projection vectors.
#[derive(Debug, Clone)]
pub struct AugmentedGaussian {
    /// `(c+1)`-vector `[cavity mean, 0]`.
    pub mean: DVector<f64>,
    /// `(c+1) x (c+1)` block-diagonal covariance of (cavity, 1).
    pub cov: DMatrix<f64>,
    /// Observed class label.
    pub label: usize,
    /// Projection vectors, one per non-label class in ascending order.
    pub projections: Vec<DVector<f64>>,
}

impl AugmentedGaussian {
    pub fn new(cavity_mean: &DVector<f64>, cavity_cov: &DMatrix<f64>, label: usize) -> Self {
        let c = cavity_mean.len();
        let m = c + 1;
        let mut mean = DVector::zeros(m);
        mean.rows_mut(0, c).copy_from(cavity_mean);
        let mut cov = DMatrix::zeros(m, m);
        cov.view_mut((0, 0), (c, c)).copy_from(cavity_cov);
        cov[(c, c)] = 1.0;
        let projections = (0..c)
            .filter(|&j| j != label)
            .map(|j| {
                let mut z = DVector::zeros(m);
                z[label] = 1.0;
                z[j] -= 1.0;
                z[c] = 1.0;
                z
            })
            .collect();
        Self {
            mean,
            cov,
            label,
            projections,
        }
    }
}

struct InnerProblem {
    aug: AugmentedGaussian,
    /// Cholesky factor of the cavity covariance.
    cavity_prec: DMatrix<f64>,
    cavity_logdet: f64,
    /// Quadratic form of the cavity: mean' * prec * mean.
    cavity_quad: f64,
}

/// `(precision, location, covariance, mean, log|precision|)` of the
/// augmented posterior under fixed sites.
type RefreshedPosterior = (
    DMatrix<f64>,
    DVector<f64>,
    DMatrix<f64>,
    DVector<f64>,
    f64,
);

impl InnerProblem {
    fn new(cavity_mean: &DVector<f64>, cavity_cov: &DMatrix<f64>, label: usize) -> Result<Self> {
        let c = cavity_mean.len();
        if label >= c {
            return Err(Error::InvalidInput(format!("label {label} for {c} classes")));
        }
        let chol = Cholesky::new(cavity_cov.clone())
            .ok_or_else(|| Error::InvalidCavity("cavity covariance not SPD".into()))?;
        let cavity_logdet = 2.0 * chol.l().diagonal().map(|v: f64| v.ln()).sum();
        let cavity_prec = chol.inverse();
        let cavity_quad = (cavity_mean.transpose() * &cavity_prec * cavity_mean)[0];
        Ok(Self {
            aug: AugmentedGaussian::new(cavity_mean, cavity_cov, label),
            cavity_prec,
            cavity_logdet,
            cavity_quad,
        })
    }

    fn dim(&self) -> usize {
        self.aug.mean.len()
    }

    /// Posterior of the augmented Gaussian under the current sites, in
    /// natural form.
    fn refresh(&self, site: &SiteState) -> Result<RefreshedPosterior> {
        let m = self.dim();
        let c = m - 1;
        let mut prec = DMatrix::zeros(m, m);
        prec.view_mut((0, 0), (c, c)).copy_from(&self.cavity_prec);
        prec[(c, c)] = 1.0;
        let mut loc = &prec * &self.aug.mean;
        for (s, z) in self.aug.projections.iter().enumerate() {
            prec += z * z.transpose() * site.tau[s];
            loc += z * site.nu[s];
        }
        let chol = Cholesky::new(prec.clone()).ok_or_else(|| {
            Error::Factorization("inner EP posterior precision not SPD".into())
        })?;
        let prec_logdet = 2.0 * chol.l().diagonal().map(|v: f64| v.ln()).sum();
        let cov = chol.inverse();
        let mean = &cov * &loc;
        Ok((prec, loc, cov, mean, prec_logdet))
    }
}

/// EP approximation of one tilted distribution.
///
/// Runs up to `sweeps` passes over the `c-1` probit sites in ascending class
/// order, warm-started from `site`, with updates damped by `damping`. The
/// returned moments and normalizer are recomputed from the final site
/// parameters so that the result is a deterministic function of
/// `(cavity, final sites)`. Site updates that would need a non-positive
/// cavity variance are skipped for the sweep; precisions that would turn
/// negative are clamped to zero (vacuous site).
pub fn tilted_moments(
    cavity_mean: &DVector<f64>,
    cavity_cov: &DMatrix<f64>,
    label: usize,
    site: &SiteState,
    damping: f64,
    sweeps: usize,
) -> Result<(TiltedResult, SiteState)> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidInput(format!("damping {damping} not in (0, 1]")));
    }
    if sweeps == 0 {
        return Err(Error::InvalidInput("sweeps must be positive".into()));
    }
    if !site.is_finite() {
        return Err(Error::InvalidInput("non-finite site parameters".into()));
    }
    run_inner(cavity_mean, cavity_cov, label, site, damping, sweeps)
}

/// Evaluates the tilted normalizer and moments implied by fixed site
/// parameters, without updating them. Used when re-assembling the outer
/// marginal likelihood from stored state.
pub fn evaluate_tilted(
    cavity_mean: &DVector<f64>,
    cavity_cov: &DMatrix<f64>,
    label: usize,
    site: &SiteState,
) -> Result<TiltedResult> {
    let (res, _) = run_inner(cavity_mean, cavity_cov, label, site, 1.0, 0)?;
    Ok(res)
}

fn run_inner(
    cavity_mean: &DVector<f64>,
    cavity_cov: &DMatrix<f64>,
    label: usize,
    site: &SiteState,
    damping: f64,
    sweeps: usize,
) -> Result<(TiltedResult, SiteState)> {
    let c = cavity_mean.len();
    let problem = InnerProblem::new(cavity_mean, cavity_cov, label)?;
    let num_sites = c - 1;
    if site.tau.len() != num_sites || site.nu.len() != num_sites {
        return Err(Error::InvalidInput(format!(
            "site has {} entries, expected {num_sites}",
            site.tau.len()
        )));
    }

    let mut sites = site.clone();
    let (_, _, mut cov, mut mean, _) = problem.refresh(&sites)?;

    let mut skipped_last = 0usize;
    let mut sweeps_run = 0usize;
    for _ in 0..sweeps {
        sweeps_run += 1;
        skipped_last = 0;
        let mut max_delta = 0.0f64;
        for (s, z) in problem.aug.projections.iter().enumerate() {
            let theta_vec = &cov * z;
            let v_q = (z.transpose() * &theta_vec)[0];
            let m_q = (z.transpose() * &mean)[0];
            // Scalar cavity by natural-parameter subtraction.
            let denom = 1.0 - sites.tau[s] * v_q;
            if denom <= 0.0 || v_q <= 0.0 {
                skipped_last += 1;
                continue;
            }
            let v_cav = v_q / denom;
            let m_cav = v_cav * (m_q / v_q - sites.nu[s]);
            let (_, m_hat, v_hat) = match probit_site_moments(m_cav, v_cav) {
                Ok(t) => t,
                Err(_) => {
                    skipped_last += 1;
                    continue;
                }
            };
            let mut d_tau = damping * (1.0 / v_hat - 1.0 / v_q);
            let mut d_nu = damping * (m_hat / v_hat - m_q / v_q);
            if sites.tau[s] + d_tau < 0.0 {
                // Probit factors are log-concave; a negative precision is
                // numerical noise, so the site is reset to vacuous.
                d_tau = -sites.tau[s];
                d_nu = -sites.nu[s];
            }
            let scale = 1.0 + d_tau * v_q;
            if scale <= 0.0 {
                skipped_last += 1;
                continue;
            }
            cov -= &theta_vec * theta_vec.transpose() * (d_tau / scale);
            mean += &theta_vec * ((d_nu - d_tau * m_q) / scale);
            sites.tau[s] += d_tau;
            sites.nu[s] += d_nu;
            max_delta = max_delta.max(d_tau.abs()).max(d_nu.abs());
        }
        if max_delta < INNER_TOL {
            break;
        }
    }

    // Recompute the posterior from the final sites: removes rank-1 drift and
    // makes the output a function of (cavity, sites) alone.
    let (_, loc, cov, mean, prec_logdet) = problem.refresh(&sites)?;

    // Marginal-likelihood assembly in the natural parameterization. Each
    // site's scale is fixed by matching the zeroth tilted moment against its
    // own cavity; the representation below stays finite for vacuous sites.
    let mut log_z = 0.0;
    for (s, z) in problem.aug.projections.iter().enumerate() {
        let theta_vec = &cov * z;
        let v_q = (z.transpose() * &theta_vec)[0];
        let m_q = (z.transpose() * &mean)[0];
        let denom = 1.0 - sites.tau[s] * v_q;
        if denom <= 0.0 || v_q <= 0.0 {
            return Err(Error::InvalidCavity(format!(
                "non-positive cavity in normalizer assembly (site {s})"
            )));
        }
        let v_cav = v_q / denom;
        let m_cav = v_cav * (m_q / v_q - sites.nu[s]);
        let zed = m_cav / (1.0 + v_cav).sqrt();
        let log_zhat = log_norm_cdf(zed);
        let t = 1.0 + sites.tau[s] * v_cav;
        let quad = v_cav * sites.nu[s] * sites.nu[s] + 2.0 * m_cav * sites.nu[s]
            - sites.tau[s] * m_cav * m_cav;
        log_z += log_zhat + 0.5 * t.ln() - quad / (2.0 * t);
    }
    // Gaussian integral of base measure times natural-form sites.
    let post_quad = mean.dot(&loc);
    log_z += -0.5 * (problem.cavity_logdet + prec_logdet)
        + 0.5 * (post_quad - problem.cavity_quad);

    if !log_z.is_finite() {
        return Err(Error::NonFinite("tilted normalizer".into()));
    }

    let c_mean = mean.rows(0, c).into_owned();
    let c_cov = cov.view((0, 0), (c, c)).into_owned();
    Ok((
        TiltedResult {
            log_z,
            mean: c_mean,
            cov: c_cov,
            skipped_sites: skipped_last,
            sweeps_run,
        },
        sites,
    ))
}
