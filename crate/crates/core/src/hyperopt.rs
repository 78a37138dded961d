//! Type-II MAP hyperparameter estimation: quasi-Newton ascent on the
//! approximate log marginal likelihood plus a weakly informative half
//! Student-t prior on the magnitude and the lengthscales.

use nalgebra::{DMatrix, DVector};

use crate::data::LabeledDataset;
use crate::ep::{self, EpMode, EpOptions, EpWarmStart};
use crate::error::{Error, Result};
use crate::kernel::Hyperparams;
use crate::laplace;

/// Half Student-t prior on a positive parameter (the magnitude `sigma`, not
/// its square, and each lengthscale).
///
/// Four degrees of freedom; the scale is set from the Student-t variance
/// formula `var = s^2 nu / (nu - 2)`, so a target variance of 100 gives
/// `s^2 = 50`.
#[derive(Debug, Clone)]
pub struct HyperPrior {
    pub dof: f64,
    pub scale2: f64,
}

impl Default for HyperPrior {
    fn default() -> Self {
        Self {
            dof: 4.0,
            scale2: 50.0,
        }
    }
}

impl HyperPrior {
    /// Log density and its derivative at `x > 0` on the natural scale.
    pub fn log_density(&self, x: f64) -> (f64, f64) {
        let nu = self.dof;
        let s2 = self.scale2;
        let norm = (2.0f64).ln() + libm::lgamma(0.5 * (nu + 1.0))
            - libm::lgamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI * s2).ln();
        let value = norm - 0.5 * (nu + 1.0) * (1.0 + x * x / (nu * s2)).ln();
        let grad = -(nu + 1.0) * x / (nu * s2 + x * x);
        (value, grad)
    }

    /// Log prior over all hyperparameters in the log parameterization,
    /// including the change-of-variables Jacobians, with gradient in the
    /// log parameters `[log sigma^2, log l_1, ...]`.
    pub fn log_prior(&self, theta_log: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(theta_log.len());
        // sigma = exp(t/2): add log |d sigma / dt| = log(sigma / 2).
        let sigma = (0.5 * theta_log[0]).exp();
        let (v, g) = self.log_density(sigma);
        value += v + (0.5 * sigma).ln();
        grad.push(g * sigma * 0.5 + 0.5);
        // l = exp(t): add log |d l / dt| = log l.
        for &t in &theta_log[1..] {
            let l = t.exp();
            let (v, g) = self.log_density(l);
            value += v + l.ln();
            grad.push(g * l + 1.0);
        }
        (value, grad)
    }
}

/// Which evidence approximation drives the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ep,
    Iep,
    La,
}

/// One objective evaluation: value, gradient, and whether the underlying
/// inference succeeded. Failures carry a `-inf` sentinel and zero gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub ok: bool,
}

/// Mutable evaluation context: keeps EP site warm starts across
/// hyperparameter evaluations and counts failures.
#[derive(Default)]
pub struct ObjectiveContext {
    pub warm: Option<EpWarmStart>,
    pub failures: usize,
    pub evals: usize,
}

fn ep_options_for(method: Method) -> EpOptions {
    EpOptions {
        mode: if method == Method::Iep {
            EpMode::Independent
        } else {
            EpMode::Full
        },
        ..EpOptions::default()
    }
}

/// Penalized log evidence and gradient at `theta_log`.
pub fn objective(
    theta_log: &[f64],
    data: &LabeledDataset,
    method: Method,
    prior: &HyperPrior,
    ctx: &mut ObjectiveContext,
) -> ObjectiveEval {
    ctx.evals += 1;
    let dim = theta_log.len();
    let failed = |ctx: &mut ObjectiveContext| {
        ctx.failures += 1;
        ObjectiveEval {
            value: f64::NEG_INFINITY,
            grad: vec![0.0; dim],
            ok: false,
        }
    };
    if theta_log.iter().any(|v| !v.is_finite()) {
        return failed(ctx);
    }
    let theta = match Hyperparams::from_vec(theta_log) {
        Ok(t) => t,
        Err(_) => return failed(ctx),
    };
    let (prior_value, prior_grad) = prior.log_prior(theta_log);

    let (evidence, mut grad) = match method {
        Method::Ep | Method::Iep => {
            let fit = match ep::run_ep_warm(data, &theta, &ep_options_for(method), ctx.warm.as_ref())
            {
                Ok(f) => f,
                Err(_) => return failed(ctx),
            };
            let g = match ep::log_marginal_grad(&fit, data, &theta) {
                Ok(g) => g.grad,
                Err(_) => return failed(ctx),
            };
            ctx.warm = Some(fit.warm_start());
            (fit.log_z, g)
        }
        Method::La => {
            let st = match laplace::newton_mode(data, &theta, laplace::NEWTON_TOL, laplace::NEWTON_MAX_ITER)
            {
                Ok(s) => s,
                Err(_) => return failed(ctx),
            };
            let g = match laplace::la_log_marginal_grad(&st, data, &theta) {
                Ok(g) => g,
                Err(_) => return failed(ctx),
            };
            (st.log_marginal, g)
        }
    };
    if !evidence.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return failed(ctx);
    }
    for (g, pg) in grad.iter_mut().zip(&prior_grad) {
        *g += pg;
    }
    ObjectiveEval {
        value: evidence + prior_value,
        grad,
        ok: true,
    }
}

/// Optimization trajectory.
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub theta: Hyperparams,
    pub value: f64,
    /// Accepted iterates: (log parameters, objective value).
    pub trace: Vec<(Vec<f64>, f64)>,
    /// True when the gradient norm dropped below tolerance.
    pub converged: bool,
    pub evals: usize,
    pub failures: usize,
}

const GRAD_TOL: f64 = 1e-3;

/// BFGS ascent with backtracking line search in log-parameter space,
/// warm-starting EP sites across evaluations. Deterministic given `init`.
pub fn optimize(
    data: &LabeledDataset,
    init: &Hyperparams,
    method: Method,
    max_evals: usize,
) -> Result<OptimizeResult> {
    let prior = HyperPrior::default();
    let mut ctx = ObjectiveContext::default();
    let dim = init.num_params();
    let mut x = DVector::from_vec(init.to_vec());

    let eval0 = objective(x.as_slice(), data, method, &prior, &mut ctx);
    if !eval0.ok {
        return Err(Error::Optimization(
            "objective failed at the initial point".into(),
        ));
    }
    let mut value = eval0.value;
    let mut grad = DVector::from_vec(eval0.grad);
    let mut trace = vec![(x.as_slice().to_vec(), value)];
    let mut hinv = DMatrix::identity(dim, dim);
    let mut converged = grad.amax() < GRAD_TOL;

    while !converged && ctx.evals < max_evals {
        let mut dir = &hinv * &grad;
        if dir.dot(&grad) <= 0.0 {
            hinv = DMatrix::identity(dim, dim);
            dir = grad.clone();
        }
        let slope = dir.dot(&grad);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..25 {
            if ctx.evals >= max_evals {
                break;
            }
            let cand = &x + &dir * step;
            let ev = objective(cand.as_slice(), data, method, &prior, &mut ctx);
            if ev.ok && ev.value >= value + 1e-4 * step * slope {
                accepted = Some((cand, ev));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, ev)) = accepted else {
            break;
        };
        let g_new = DVector::from_vec(ev.grad);
        let s = &x_new - &x;
        // Minimization convention on -objective: y = g_old - g_new.
        let yv = &grad - &g_new;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let identity = DMatrix::identity(dim, dim);
            let left = &identity - &s * yv.transpose() * rho;
            hinv = &left * hinv * left.transpose() + &s * s.transpose() * rho;
        }
        x = x_new;
        value = ev.value;
        grad = g_new;
        trace.push((x.as_slice().to_vec(), value));
        if grad.amax() < GRAD_TOL {
            converged = true;
        }
        if s.amax() < 1e-10 {
            break;
        }
    }

    Ok(OptimizeResult {
        theta: Hyperparams::from_vec(x.as_slice())?,
        value,
        trace,
        converged,
        evals: ctx.evals,
        failures: ctx.failures,
    })
}

/// Log of the median pairwise Euclidean distance between input rows; the
/// usual lengthscale initialization heuristic.
pub fn median_distance_log(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut dists = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let d = (x.row(i) - x.row(j)).norm();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2].ln()
}

/// Default multi-start schedule: magnitudes `log sigma^2 in {0, 2}` at the
/// median-distance lengthscale, plus one start at a doubled lengthscale.
pub fn default_inits(data: &LabeledDataset, ard: bool) -> Vec<Hyperparams> {
    let med = median_distance_log(&data.x);
    let q = if ard { data.dim() } else { 1 };
    let make = |lm: f64, ll: f64| Hyperparams {
        log_magnitude: lm,
        log_lengthscales: vec![ll; q],
    };
    vec![
        make(0.0, med),
        make(2.0, med),
        make(2.0, med + std::f64::consts::LN_2),
    ]
}

/// Runs [`optimize`] from each default start and keeps the best objective;
/// ties break toward the earliest start.
pub fn optimize_multistart(
    data: &LabeledDataset,
    method: Method,
    ard: bool,
    max_evals: usize,
) -> Result<OptimizeResult> {
    let mut best: Option<OptimizeResult> = None;
    for init in default_inits(data, ard) {
        match optimize(data, &init, method, max_evals) {
            Ok(res) => {
                let better = best
                    .as_ref()
                    .map(|b| res.value > b.value)
                    .unwrap_or(true);
                if better {
                    best = Some(res);
                }
            }
            Err(_) => continue,
        }
    }
    best.ok_or_else(|| Error::Optimization("all starts failed".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let prior = HyperPrior::default();
        let t = vec![0.8, -0.4, 0.3];
        let (_, grad) = prior.log_prior(&t);
        let h = 1e-6;
        for j in 0..t.len() {
            let mut up = t.clone();
            let mut dn = t.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (prior.log_prior(&up).0 - prior.log_prior(&dn).0) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() / fd.abs().max(1e-8) < 1e-8,
                "prior grad {j}: {} vs {}",
                grad[j],
                fd
            );
        }
    }

    #[test]
    fn prior_scale_gives_target_variance() {
        let prior = HyperPrior::default();
        // var = s^2 * nu / (nu - 2) = 50 * 2 = 100.
        assert!((prior.scale2 * prior.dof / (prior.dof - 2.0) - 100.0).abs() < 1e-12);
        let (v, _) = prior.log_density(1e-6);
        assert!(v.is_finite());
        let (v, _) = prior.log_density(1e6);
        assert!(v.is_finite());
    }

    #[test]
    fn median_heuristic_on_fixed_points() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        // Pairwise distances 1, 2, 3 -> median 2.
        assert!((median_distance_log(&x) - 2.0f64.ln()).abs() < 1e-12);
    }
}
