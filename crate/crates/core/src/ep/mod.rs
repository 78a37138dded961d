//! Outer EP loop with parallel site updates.
//!
//! Each sweep computes every observation's cavity from the current
//! marginals, re-approximates the tilted distribution with the inner EP
//! (warm-started from the stored scalar sites), then refreshes the blocked
//! posterior once. Site results are accumulated first and applied together,
//! so a sweep's outcome does not depend on the execution order of the
//! per-observation work.

pub mod posterior;
pub mod sites;

use nalgebra::{Cholesky, DMatrix, DVector};

pub use posterior::{refresh_posterior, refresh_posterior_independent, PosteriorState};
pub use sites::{site_location, site_precision, StructuredSite};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::inner::{self, SiteState, MAX_INNER_SWEEPS};
use crate::kernel::{covariance_grad, jittered_covariance, Hyperparams, JITTER_REL};
use crate::par;

/// Posterior coupling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpMode {
    /// Full between-class posterior couplings, `O((c+1) n^3)`.
    Full,
    /// Independent per-class posteriors (IEP), `O(c n^3)`.
    Independent,
}

/// How many inner-EP sweeps each outer update runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMode {
    /// Run the inner EP to convergence at every outer update.
    Standard,
    /// One inner sweep per outer update, relying on warm starts.
    Incremental,
}

/// Outer-loop options.
#[derive(Debug, Clone)]
pub struct EpOptions {
    pub mode: EpMode,
    pub inner_mode: InnerMode,
    /// Damping factor in (0, 1]. Full mode damps the inner natural
    /// parameters; independent mode damps the outer diagonal sites.
    pub damping: f64,
    /// Convergence tolerance on the largest site-parameter change and on
    /// the marginal-likelihood change.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Drop the damping factor to 0.5 if the evidence trace oscillates.
    pub adaptive_damping: bool,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self {
            mode: EpMode::Full,
            inner_mode: InnerMode::Incremental,
            damping: 0.8,
            outer_tol: 1e-6,
            max_outer: 100,
            adaptive_damping: true,
        }
    }
}

/// Per-sweep diagnostics, the material of a convergence trace.
#[derive(Debug, Clone)]
pub struct SweepDiag {
    pub log_z_ep: f64,
    pub max_delta: f64,
    pub skipped_sites: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EpDiagnostics {
    pub trace: Vec<SweepDiag>,
    pub converged: bool,
    /// Total inner-EP sweeps executed across the run.
    pub inner_sweep_count: usize,
    /// Damping factor in effect at the end (may differ from the requested
    /// one if the adaptive fallback triggered).
    pub final_damping: f64,
}

impl EpDiagnostics {
    pub fn sweeps(&self) -> usize {
        self.trace.len()
    }
}

/// A fitted EP approximation.
pub struct EpFit {
    pub posterior: PosteriorState,
    /// Inner scalar sites per observation (warm-start state).
    pub inner_sites: Vec<SiteState>,
    /// Outer diagonal sites (independent mode only): `(tau, nu)`, `n x c`.
    pub diag_sites: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub labels: Vec<usize>,
    pub log_z: f64,
    pub diagnostics: EpDiagnostics,
}

/// Warm-start payload carried between hyperparameter evaluations.
#[derive(Debug, Clone)]
pub struct EpWarmStart {
    pub inner_sites: Vec<SiteState>,
    pub diag_sites: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl EpFit {
    pub fn warm_start(&self) -> EpWarmStart {
        EpWarmStart {
            inner_sites: self.inner_sites.clone(),
            diag_sites: self.diag_sites.clone(),
        }
    }
}

enum SiteOutcome {
    Updated {
        site: SiteState,
        diag: Option<(Vec<f64>, Vec<f64>)>,
        delta: f64,
        inner_sweeps: usize,
    },
    Skipped,
}

/// Cavity of one observation under the coupled representation, by
/// natural-parameter subtraction. Returns `None` when the cavity precision
/// is not positive definite.
fn coupled_cavity(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    site: &StructuredSite,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let chol = Cholesky::new(cov.clone())?;
    let prec = chol.inverse();
    let cav_prec = &prec - site.precision_matrix();
    let cav_chol = Cholesky::new(cav_prec)?;
    let cav_cov = cav_chol.inverse();
    let h = &prec * mean - &site.nu;
    let cav_mean = &cav_cov * h;
    Some((cav_mean, cav_cov))
}

fn full_sweep(
    data: &LabeledDataset,
    state: &PosteriorState,
    inner_sites: &[SiteState],
    damping: f64,
    inner_sweeps: usize,
) -> Vec<Result<SiteOutcome>> {
    par::map_indexed(data.len(), |i| {
        let label = data.y[i];
        let structured = StructuredSite::from_inner(&inner_sites[i], label);
        let mean = state.marginal_mean(i);
        let cov = state.marginal_cov(i);
        let (cav_mean, cav_cov) = match coupled_cavity(&mean, &cov, &structured) {
            Some(c) => c,
            None => return Ok(SiteOutcome::Skipped),
        };
        match inner::tilted_moments(&cav_mean, &cav_cov, label, &inner_sites[i], damping, inner_sweeps)
        {
            Ok((tilted, site)) => {
                let delta = site
                    .tau
                    .iter()
                    .zip(&inner_sites[i].tau)
                    .chain(site.nu.iter().zip(&inner_sites[i].nu))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                Ok(SiteOutcome::Updated {
                    site,
                    diag: None,
                    delta,
                    inner_sweeps: tilted.sweeps_run,
                })
            }
            Err(Error::InvalidCavity(_)) => Ok(SiteOutcome::Skipped),
            Err(e) => Err(Error::InnerEp {
                observation: i,
                detail: e.to_string(),
            }),
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn independent_sweep(
    data: &LabeledDataset,
    state: &PosteriorState,
    inner_sites: &[SiteState],
    tau: &DMatrix<f64>,
    nu: &DMatrix<f64>,
    damping: f64,
    inner_sweeps: usize,
) -> Vec<Result<SiteOutcome>> {
    let c = data.num_classes;
    par::map_indexed(data.len(), |i| {
        let label = data.y[i];
        let mut cav_var = DVector::zeros(c);
        let mut cav_mean = DVector::zeros(c);
        for class in 0..c {
            let v = state.variances()[(i, class)];
            if v <= 0.0 {
                return Ok(SiteOutcome::Skipped);
            }
            let prec = 1.0 / v - tau[(i, class)];
            if prec <= 0.0 {
                return Ok(SiteOutcome::Skipped);
            }
            cav_var[class] = 1.0 / prec;
            cav_mean[class] =
                cav_var[class] * (state.means()[(i, class)] / v - nu[(i, class)]);
        }
        let cav_cov = DMatrix::from_diagonal(&cav_var);
        // Independent mode damps the outer diagonal sites, so the inner EP
        // itself runs undamped.
        match inner::tilted_moments(&cav_mean, &cav_cov, label, &inner_sites[i], 1.0, inner_sweeps)
        {
            Ok((tilted, site)) => {
                let mut new_tau = vec![0.0; c];
                let mut new_nu = vec![0.0; c];
                let mut delta = 0.0f64;
                for class in 0..c {
                    let vhat = tilted.cov[(class, class)];
                    if vhat <= 0.0 {
                        return Ok(SiteOutcome::Skipped);
                    }
                    let tau_prop = 1.0 / vhat - 1.0 / cav_var[class];
                    let nu_prop =
                        tilted.mean[class] / vhat - cav_mean[class] / cav_var[class];
                    let t = tau[(i, class)] + damping * (tau_prop - tau[(i, class)]);
                    new_tau[class] = t.max(0.0);
                    new_nu[class] = nu[(i, class)] + damping * (nu_prop - nu[(i, class)]);
                    delta = delta
                        .max((new_tau[class] - tau[(i, class)]).abs())
                        .max((new_nu[class] - nu[(i, class)]).abs());
                }
                Ok(SiteOutcome::Updated {
                    site,
                    diag: Some((new_tau, new_nu)),
                    delta,
                    inner_sweeps: tilted.sweeps_run,
                })
            }
            Err(Error::InvalidCavity(_)) => Ok(SiteOutcome::Skipped),
            Err(e) => Err(Error::InnerEp {
                observation: i,
                detail: e.to_string(),
            }),
        }
    })
}

/// Detects an oscillating evidence trace: at least three sign alternations
/// among the last five deltas.
fn oscillating(trace: &[SweepDiag]) -> bool {
    if trace.len() < 6 {
        return false;
    }
    let tail: Vec<f64> = trace[trace.len() - 6..]
        .iter()
        .map(|s| s.log_z_ep)
        .collect();
    if tail.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let deltas: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    let flips = deltas
        .windows(2)
        .filter(|w| w[0] * w[1] < 0.0)
        .count();
    flips >= 3
}

/// Runs EP to convergence, cold-started from vacuous sites.
pub fn run_ep(data: &LabeledDataset, theta: &Hyperparams, opts: &EpOptions) -> Result<EpFit> {
    run_ep_warm(data, theta, opts, None)
}

/// Runs EP warm-started from a previous fit's sites.
pub fn run_ep_warm(
    data: &LabeledDataset,
    theta: &Hyperparams,
    opts: &EpOptions,
    warm: Option<&EpWarmStart>,
) -> Result<EpFit> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "damping {} not in (0, 1]",
            opts.damping
        )));
    }
    let n = data.len();
    let c = data.num_classes;
    let k_eff = jittered_covariance(&data.x, theta)?;

    let mut inner_sites: Vec<SiteState> = match warm {
        Some(w) if w.inner_sites.len() == n => w.inner_sites.clone(),
        _ => vec![SiteState::vacuous(c); n],
    };
    let (mut diag_tau, mut diag_nu) = match (opts.mode, warm.and_then(|w| w.diag_sites.clone())) {
        (EpMode::Independent, Some((t, v))) if t.nrows() == n => (t, v),
        (EpMode::Independent, _) => (DMatrix::zeros(n, c), DMatrix::zeros(n, c)),
        _ => (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)),
    };

    let mut state = match opts.mode {
        EpMode::Full => {
            let structured: Vec<StructuredSite> = inner_sites
                .iter()
                .zip(&data.y)
                .map(|(s, &y)| StructuredSite::from_inner(s, y))
                .collect();
            refresh_posterior(&k_eff, &structured)?
        }
        EpMode::Independent => refresh_posterior_independent(&k_eff, &diag_tau, &diag_nu)?,
    };

    let inner_sweeps = match opts.inner_mode {
        InnerMode::Standard => MAX_INNER_SWEEPS,
        InnerMode::Incremental => 1,
    };

    let mut diagnostics = EpDiagnostics {
        final_damping: opts.damping,
        ..Default::default()
    };
    let mut damping = opts.damping;
    let mut prev_log_z = f64::NAN;

    for _sweep in 0..opts.max_outer {
        let outcomes = match opts.mode {
            EpMode::Full => full_sweep(data, &state, &inner_sites, damping, inner_sweeps),
            EpMode::Independent => independent_sweep(
                data,
                &state,
                &inner_sites,
                &diag_tau,
                &diag_nu,
                damping,
                inner_sweeps,
            ),
        };

        let mut max_delta = 0.0f64;
        let mut skipped = 0usize;
        for (i, outcome) in outcomes.into_iter().enumerate() {
            match outcome? {
                SiteOutcome::Updated {
                    site,
                    diag,
                    delta,
                    inner_sweeps,
                } => {
                    inner_sites[i] = site;
                    if let Some((t, v)) = diag {
                        for class in 0..c {
                            diag_tau[(i, class)] = t[class];
                            diag_nu[(i, class)] = v[class];
                        }
                    }
                    max_delta = max_delta.max(delta);
                    diagnostics.inner_sweep_count += inner_sweeps;
                }
                SiteOutcome::Skipped => skipped += 1,
            }
        }

        state = match opts.mode {
            EpMode::Full => {
                let structured: Vec<StructuredSite> = inner_sites
                    .iter()
                    .zip(&data.y)
                    .map(|(s, &y)| StructuredSite::from_inner(s, y))
                    .collect();
                refresh_posterior(&k_eff, &structured)?
            }
            EpMode::Independent => refresh_posterior_independent(&k_eff, &diag_tau, &diag_nu)?,
        };

        let log_z = log_marginal(&state, &inner_sites, &data.y).unwrap_or(f64::NAN);
        diagnostics.trace.push(SweepDiag {
            log_z_ep: log_z,
            max_delta,
            skipped_sites: skipped,
        });

        let evidence_settled = (log_z - prev_log_z).abs() < opts.outer_tol;
        if max_delta < opts.outer_tol && evidence_settled {
            diagnostics.converged = true;
            break;
        }
        prev_log_z = log_z;

        if opts.adaptive_damping && damping > 0.5 && oscillating(&diagnostics.trace) {
            damping = 0.5;
            diagnostics.final_damping = damping;
        }
    }

    let log_z = log_marginal(&state, &inner_sites, &data.y)?;
    Ok(EpFit {
        posterior: state,
        inner_sites,
        diag_sites: match opts.mode {
            EpMode::Independent => Some((diag_tau, diag_nu)),
            EpMode::Full => None,
        },
        labels: data.y.clone(),
        log_z,
        diagnostics,
    })
}

/// EP marginal-likelihood approximation for the current state.
///
/// Cavities are rebuilt from the stored marginals and sites, the tilted
/// normalizers are re-evaluated from the stored inner sites, and the
/// determinant uses the blocked identity, so structured and dense
/// representations of the same state agree to numerical precision.
pub fn log_marginal(
    state: &PosteriorState,
    inner_sites: &[SiteState],
    labels: &[usize],
) -> Result<f64> {
    let n = state.num_obs();
    let c = state.num_classes();
    if inner_sites.len() != n || labels.len() != n {
        return Err(Error::InvalidInput("stale state: size mismatch".into()));
    }

    let mut value = -0.5 * state.logdet();
    for i in 0..n {
        for class in 0..c {
            value += 0.5 * state.site_location()[(i, class)] * state.means()[(i, class)];
        }
    }

    let site_terms = par::map_indexed(n, |i| -> Result<f64> {
        let label = labels[i];
        let (cav_mean, cav_cov, cav_quad, cav_logdet, marg_quad, marg_logdet) = if state.coupled {
            let mean = state.marginal_mean(i);
            let cov = state.marginal_cov(i);
            let chol = Cholesky::new(cov.clone())
                .ok_or_else(|| Error::Factorization(format!("marginal {i} not SPD")))?;
            let marg_logdet = 2.0 * chol.l().diagonal().map(|v: f64| v.ln()).sum();
            let prec = chol.inverse();
            let marg_quad = (mean.transpose() * &prec * &mean)[0];
            let pi = state.pi().row(i).transpose();
            let big_pi = DMatrix::from_diagonal(&pi) - &pi * pi.transpose() / pi.sum();
            let cav_prec = &prec - big_pi;
            let cav_chol = Cholesky::new(cav_prec).ok_or_else(|| {
                Error::Factorization(format!("cavity {i} not positive definite"))
            })?;
            let cav_logdet = -2.0 * cav_chol.l().diagonal().map(|v: f64| v.ln()).sum();
            let h = &prec * &mean - state.site_location().row(i).transpose();
            let cav_mean = cav_chol.solve(&h);
            let cav_quad = h.dot(&cav_mean);
            let cav_cov = cav_chol.inverse();
            (cav_mean, cav_cov, cav_quad, cav_logdet, marg_quad, marg_logdet)
        } else {
            let mut cav_var = DVector::zeros(c);
            let mut cav_mean = DVector::zeros(c);
            let mut cav_quad = 0.0;
            let mut cav_logdet = 0.0;
            let mut marg_quad = 0.0;
            let mut marg_logdet = 0.0;
            for class in 0..c {
                let v = state.variances()[(i, class)];
                let m = state.means()[(i, class)];
                let prec = 1.0 / v - state.pi()[(i, class)];
                if v <= 0.0 || prec <= 0.0 {
                    return Err(Error::Factorization(format!(
                        "cavity {i} not positive definite"
                    )));
                }
                marg_quad += m * m / v;
                marg_logdet += v.ln();
                let vc = 1.0 / prec;
                let mc = vc * (m / v - state.site_location()[(i, class)]);
                cav_var[class] = vc;
                cav_mean[class] = mc;
                cav_quad += mc * mc / vc;
                cav_logdet += vc.ln();
            }
            let cav_cov = DMatrix::from_diagonal(&cav_var);
            (cav_mean, cav_cov, cav_quad, cav_logdet, marg_quad, marg_logdet)
        };
        let tilted = inner::evaluate_tilted(&cav_mean, &cav_cov, label, &inner_sites[i])?;
        Ok(tilted.log_z + 0.5 * (cav_quad + cav_logdet) - 0.5 * (marg_quad + marg_logdet))
    });

    for term in site_terms {
        value += term?;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    Ok(value)
}

/// Gradient of the EP marginal likelihood with respect to the
/// log-hyperparameters, holding site and cavity parameters fixed.
#[derive(Debug, Clone)]
pub struct EvidenceGradient {
    pub grad: Vec<f64>,
    /// False when the gradient was requested on a non-converged state, in
    /// which case the stationarity argument behind the formula is void.
    pub state_converged: bool,
}

pub fn log_marginal_grad(
    fit: &EpFit,
    data: &LabeledDataset,
    theta: &Hyperparams,
) -> Result<EvidenceGradient> {
    let block = &fit.posterior.block;
    let n = block.n;
    // R = sum_k zeta_k zeta_k' - sum_k M_kk; grad_j = 0.5 tr(R dK_j).
    let mut r_mat = -block.m_diag_block_sum()?;
    for class in 0..block.c {
        let z = block.zeta.column(class);
        r_mat += z * z.transpose();
    }
    let eps = JITTER_REL * theta.sigma2();
    let mut grad = Vec::with_capacity(theta.num_params());
    for which in 0..theta.num_params() {
        let mut dk = covariance_grad(&data.x, theta, which)?;
        if which == 0 {
            // The jitter scales with sigma^2, so the effective kernel keeps
            // the d/dlog(sigma^2) = K identity including its diagonal.
            for i in 0..n {
                dk[(i, i)] += eps;
            }
        }
        let mut g = 0.0;
        for i in 0..n {
            for j in 0..n {
                g += r_mat[(i, j)] * dk[(i, j)];
            }
        }
        grad.push(0.5 * g);
    }
    Ok(EvidenceGradient {
        grad,
        state_converged: fit.diagnostics.converged,
    })
}

/// Largest moment-matching residuals `|tilted mean - marginal mean|` and
/// `|tilted cov - marginal cov|` over all observations; near zero at an EP
/// fixed point.
pub fn moment_residuals(fit: &EpFit) -> Result<(f64, f64)> {
    let state = &fit.posterior;
    let n = state.num_obs();
    let c = state.num_classes();
    let mut mean_res = 0.0f64;
    let mut cov_res = 0.0f64;
    for i in 0..n {
        let label = fit.labels[i];
        let mean = state.marginal_mean(i);
        let cov = state.marginal_cov(i);
        let (cav_mean, cav_cov) = if state.coupled {
            let site = StructuredSite {
                pi: state.pi().row(i).transpose(),
                nu: state.site_location().row(i).transpose(),
                label,
            };
            coupled_cavity(&mean, &cov, &site)
                .ok_or_else(|| Error::Factorization(format!("cavity {i} not SPD")))?
        } else {
            let mut cav_var = DVector::zeros(c);
            let mut cav_mean = DVector::zeros(c);
            for class in 0..c {
                let v = state.variances()[(i, class)];
                let prec = 1.0 / v - state.pi()[(i, class)];
                cav_var[class] = 1.0 / prec;
                cav_mean[class] = cav_var[class]
                    * (state.means()[(i, class)] / v - state.site_location()[(i, class)]);
            }
            (cav_mean, DMatrix::from_diagonal(&cav_var))
        };
        let tilted = inner::evaluate_tilted(&cav_mean, &cav_cov, label, &fit.inner_sites[i])?;
        mean_res = mean_res.max((&tilted.mean - &mean).abs().max());
        if state.coupled {
            cov_res = cov_res.max((&tilted.cov - &cov).abs().max());
        } else {
            for class in 0..c {
                cov_res = cov_res
                    .max((tilted.cov[(class, class)] - state.variances()[(i, class)]).abs());
            }
        }
    }
    Ok((mean_res, cov_res))
}
