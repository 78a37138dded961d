//! Laplace approximation with the softmax likelihood, plus a predictive
//! correction that scores each candidate test label by the ratio of extended
//! and base marginal likelihoods.
//!
//! The softmax Hessian blocks `W_i = diag(p_i) - p_i p_i'` have the same
//! 1-annihilating structure as the EP site precisions, so mode finding and
//! the evidence reuse the blocked `O((c+1) n^3)` machinery.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernel::{covariance_grad, cross_covariance, jittered_covariance, Hyperparams, JITTER_REL};
use crate::par;
use crate::structured::BlockPosterior;

/// Default Newton tolerance on the stationarity residual.
pub const NEWTON_TOL: f64 = 1e-10;
/// Default Newton iteration cap.
pub const NEWTON_MAX_ITER: usize = 60;
/// Monte Carlo draws for predictive softmax averaging.
pub const PREDICT_DRAWS: usize = 10_000;

/// Numerically stable softmax of one latent vector.
pub fn softmax_probs(f: &DVector<f64>) -> DVector<f64> {
    let m = f.max();
    let ex = f.map(|v| (v - m).exp());
    let s = ex.sum();
    ex / s
}

fn softmax_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = f.clone();
    for i in 0..f.nrows() {
        let row = softmax_probs(&f.row(i).transpose());
        for k in 0..f.ncols() {
            p[(i, k)] = row[k];
        }
    }
    p
}

fn log_likelihood(f: &DMatrix<f64>, y: &[usize]) -> f64 {
    let mut ll = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let row = f.row(i).transpose();
        let m = row.max();
        let lse = m + row.map(|v| (v - m).exp()).sum().ln();
        ll += f[(i, label)] - lse;
    }
    ll
}

/// Fitted Laplace approximation.
pub struct LaplaceState {
    /// Posterior mode, `n x c`.
    pub mode: DMatrix<f64>,
    /// Softmax probabilities at the mode (their rows define `W`).
    pub probs: DMatrix<f64>,
    /// `K^{-1} mode = t - probs`, the predictive mean coefficients.
    pub coeffs: DMatrix<f64>,
    /// Laplace marginal-likelihood approximation.
    pub log_marginal: f64,
    pub converged: bool,
    /// Stationarity residual `max |(t - p) - K^{-1} f|`.
    pub residual: f64,
    /// Log posterior after each accepted Newton step.
    pub objective_trace: Vec<f64>,
    pub(crate) block: BlockPosterior,
}

/// Finds the softmax posterior mode by Newton iteration with step-halving,
/// cold-started at zero.
pub fn newton_mode(
    data: &LabeledDataset,
    theta: &Hyperparams,
    tol: f64,
    max_iter: usize,
) -> Result<LaplaceState> {
    newton_mode_with_init(data, theta, tol, max_iter, None)
}

/// Newton mode finding from a caller-supplied initial latent matrix.
pub fn newton_mode_with_init(
    data: &LabeledDataset,
    theta: &Hyperparams,
    tol: f64,
    max_iter: usize,
    init: Option<&DMatrix<f64>>,
) -> Result<LaplaceState> {
    let n = data.len();
    let c = data.num_classes;
    let k_eff = jittered_covariance(&data.x, theta)?;
    let targets = DMatrix::from_fn(n, c, |i, k| if data.y[i] == k { 1.0 } else { 0.0 });

    let (mut f, mut a) = match init {
        Some(f0) => {
            if f0.nrows() != n || f0.ncols() != c {
                return Err(Error::InvalidInput("init shape mismatch".into()));
            }
            let chol = Cholesky::new(k_eff.clone())
                .ok_or_else(|| Error::Factorization("prior covariance not SPD".into()))?;
            let mut a0 = DMatrix::zeros(n, c);
            for class in 0..c {
                a0.set_column(class, &chol.solve(&f0.column(class).into_owned()));
            }
            (f0.clone(), a0)
        }
        None => (DMatrix::zeros(n, c), DMatrix::zeros(n, c)),
    };

    let psi = |f: &DMatrix<f64>, a: &DMatrix<f64>| -> f64 {
        log_likelihood(f, &data.y) - 0.5 * f.dot(a)
    };

    let mut objective_trace = vec![psi(&f, &a)];
    let mut converged = false;
    let mut residual = f64::INFINITY;

    for _ in 0..max_iter {
        let p = softmax_rows(&f);
        // b = W f + (t - p), with (W_i f_i) = p .* f - p (p' f).
        let mut b = DMatrix::zeros(n, c);
        for i in 0..n {
            let pf: f64 = (0..c).map(|k| p[(i, k)] * f[(i, k)]).sum();
            for k in 0..c {
                b[(i, k)] = p[(i, k)] * f[(i, k)] - p[(i, k)] * pf + targets[(i, k)] - p[(i, k)];
            }
        }
        let step = BlockPosterior::build(&k_eff, &p, &b, true)?;
        let f_new = step.mean.clone();
        let a_new = step.zeta.clone();

        let psi_old = *objective_trace.last().unwrap();
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let f_try = &f + (&f_new - &f) * s;
            let a_try = &a + (&a_new - &a) * s;
            let val = psi(&f_try, &a_try);
            if val >= psi_old - 1e-12 * (1.0 + psi_old.abs()) {
                accepted = Some((f_try, a_try, val));
                break;
            }
            s *= 0.5;
        }
        let Some((f_acc, a_acc, val)) = accepted else {
            break;
        };
        f = f_acc;
        a = a_acc;
        objective_trace.push(val);

        let p_now = softmax_rows(&f);
        residual = (0..n)
            .flat_map(|i| (0..c).map(move |k| (i, k)))
            .map(|(i, k)| (targets[(i, k)] - p_now[(i, k)] - a[(i, k)]).abs())
            .fold(0.0f64, f64::max);
        if residual < tol {
            converged = true;
            break;
        }
    }

    let probs = softmax_rows(&f);
    let coeffs = &targets - &probs;
    // Factors at the mode for evidence, marginals, and prediction.
    let block = BlockPosterior::build(&k_eff, &probs, &coeffs, true)?;
    let log_marginal = log_likelihood(&f, &data.y) - 0.5 * f.dot(&a) - 0.5 * block.logdet;

    Ok(LaplaceState {
        mode: f,
        probs,
        coeffs,
        log_marginal,
        converged,
        residual,
        objective_trace,
        block,
    })
}

/// Latent predictive mean and covariance at each row of `xstar`.
pub fn la_latent_predict(
    state: &LaplaceState,
    x_train: &DMatrix<f64>,
    theta: &Hyperparams,
    xstar: &DMatrix<f64>,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let kstar = cross_covariance(x_train, xstar, theta)?;
    state
        .block
        .predict_latent(&kstar, theta.sigma2(), &state.coeffs)
}

/// Predictive class probabilities by seeded Monte Carlo softmax averaging
/// over the Gaussian latent belief.
pub fn la_predict(
    state: &LaplaceState,
    x_train: &DMatrix<f64>,
    theta: &Hyperparams,
    xstar: &[f64],
    draws: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let xs = DMatrix::from_row_slice(1, xstar.len(), xstar);
    let latents = la_latent_predict(state, x_train, theta, &xs)?;
    let (mean, cov) = &latents[0];
    mc_softmax_average(mean, cov, draws, seed)
}

fn mc_softmax_average(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let c = mean.len();
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(sym.clone())
        .or_else(|| {
            let mut bumped = sym;
            for i in 0..c {
                bumped[(i, i)] += 1e-10 * (1.0 + bumped[(i, i)].abs());
            }
            Cholesky::new(bumped)
        })
        .ok_or_else(|| Error::Factorization("predictive covariance not SPD".into()))?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DVector::zeros(c);
    for _ in 0..draws {
        let z = DVector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = mean + &l * z;
        acc += softmax_probs(&f);
    }
    Ok(acc / draws as f64)
}

/// Options for the extended-marginal predictive correction.
#[derive(Debug, Clone)]
pub struct TkpOptions {
    /// Initialize the extended mode at `[mode; predictive mean]` instead of
    /// cold-starting at zero.
    pub warm_init: bool,
    /// Newton tolerance for the extended problems.
    pub tol: f64,
    pub max_iter: usize,
    /// Draws/seed for the fallback predictor on Newton failure.
    pub fallback_draws: usize,
    pub fallback_seed: u64,
}

impl Default for TkpOptions {
    fn default() -> Self {
        Self {
            warm_init: true,
            tol: NEWTON_TOL,
            max_iter: NEWTON_MAX_ITER,
            fallback_draws: PREDICT_DRAWS,
            fallback_seed: 0x6c61,
        }
    }
}

/// Result of the extended-marginal correction at one test input.
#[derive(Debug, Clone)]
pub struct TkpPrediction {
    pub probs: DVector<f64>,
    /// Sum of the marginal-likelihood ratios before renormalization.
    pub raw_sum: f64,
    /// True when some extended Newton run failed and the plain predictive
    /// average was substituted.
    pub fallback: bool,
}

/// Class probabilities at `xstar` as ratios of extended marginal
/// likelihoods: for each candidate label the test point is appended as one
/// more training observation and the Laplace evidence is recomputed.
pub fn la_tkp_predict(
    data: &LabeledDataset,
    theta: &Hyperparams,
    base: &LaplaceState,
    xstar: &[f64],
    opts: &TkpOptions,
) -> Result<TkpPrediction> {
    let c = data.num_classes;
    let init = if opts.warm_init {
        let xs = DMatrix::from_row_slice(1, xstar.len(), xstar);
        let latents = la_latent_predict(base, &data.x, theta, &xs)?;
        let (mean, _) = &latents[0];
        let mut f0 = DMatrix::zeros(data.len() + 1, c);
        f0.view_mut((0, 0), (data.len(), c)).copy_from(&base.mode);
        for k in 0..c {
            f0[(data.len(), k)] = mean[k];
        }
        Some(f0)
    } else {
        None
    };

    let extended = par::map_indexed(c, |label| -> Result<f64> {
        let ext = data.extended(xstar, label)?;
        let state = newton_mode_with_init(&ext, theta, opts.tol, opts.max_iter, init.as_ref())?;
        if !state.converged {
            return Err(Error::Optimization(format!(
                "extended Newton did not converge for class {label}"
            )));
        }
        Ok(state.log_marginal)
    });

    let mut ratios = Vec::with_capacity(c);
    for r in extended {
        match r {
            Ok(lz) => ratios.push((lz - base.log_marginal).exp()),
            Err(_) => {
                let probs = la_predict(
                    base,
                    &data.x,
                    theta,
                    xstar,
                    opts.fallback_draws,
                    opts.fallback_seed,
                )?;
                return Ok(TkpPrediction {
                    probs,
                    raw_sum: 1.0,
                    fallback: true,
                });
            }
        }
    }
    let raw_sum: f64 = ratios.iter().sum();
    if !raw_sum.is_finite() || raw_sum <= 0.0 {
        return Err(Error::NonFinite("extended marginal ratios".into()));
    }
    Ok(TkpPrediction {
        probs: DVector::from_fn(c, |k, _| ratios[k] / raw_sum),
        raw_sum,
        fallback: false,
    })
}

/// Gradient of the Laplace evidence with respect to the log-hyperparameters,
/// including the implicit mode-shift terms.
pub fn la_log_marginal_grad(
    state: &LaplaceState,
    data: &LabeledDataset,
    theta: &Hyperparams,
) -> Result<Vec<f64>> {
    let block = &state.block;
    let n = block.n;
    let c = block.c;

    // Explicit part: 0.5 tr[(sum_k a_k a_k' - sum_k M_kk) dK].
    let mut r_mat = -block.m_diag_block_sum()?;
    for class in 0..c {
        let a = state.coeffs.column(class);
        r_mat += a * a.transpose();
    }

    // Implicit part: d logZ / d f_hat through W, then the mode shift.
    // s2[i, m] = -0.5 sum_{k,l} C_i[k,l] dW_i[k,l]/df_i^m, which collapses to
    // -0.5 p_m (C_mm - tr(C diag(p)) - 2 (C p)_m + 2 p' C p).
    let mut s2 = DMatrix::zeros(n, c);
    for i in 0..n {
        let cov = block.marginal_cov(i);
        let p = state.probs.row(i).transpose();
        let cp = &cov * &p;
        let q = p.dot(&cp);
        let tr_w: f64 = (0..c).map(|k| cov[(k, k)] * p[k]).sum();
        for m in 0..c {
            s2[(i, m)] = -0.5 * p[m] * (cov[(m, m)] - tr_w - 2.0 * cp[m] + 2.0 * q);
        }
    }
    // h = (I - M K) s2.
    let mut ks2 = DMatrix::zeros(n, c);
    for class in 0..c {
        ks2.set_column(class, &(&block.k * s2.column(class)));
    }
    let h = &s2 - block.apply_m(&ks2);

    let eps = JITTER_REL * theta.sigma2();
    let mut grad = Vec::with_capacity(theta.num_params());
    for which in 0..theta.num_params() {
        let mut dk = covariance_grad(&data.x, theta, which)?;
        if which == 0 {
            for i in 0..n {
                dk[(i, i)] += eps;
            }
        }
        let mut explicit = 0.0;
        for i in 0..n {
            for j in 0..n {
                explicit += r_mat[(i, j)] * dk[(i, j)];
            }
        }
        let mut implicit = 0.0;
        for class in 0..c {
            implicit += h.column(class).dot(&(&dk * state.coeffs.column(class)));
        }
        grad.push(0.5 * explicit + implicit);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_is_stable_and_uniform_at_zero() {
        let p = softmax_probs(&DVector::zeros(4));
        for k in 0..4 {
            assert_relative_eq!(p[k], 0.25, max_relative = 1e-14);
        }
        let p = softmax_probs(&DVector::from_row_slice(&[100.0, 0.0, 0.0]));
        assert!(p[0] > 0.999 && p.iter().all(|v| v.is_finite()));
        let p = softmax_probs(&DVector::from_row_slice(&[1000.0, -1000.0, 0.0]));
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_ratio() {
        let f = DVector::from_row_slice(&[0.3, -1.2, 0.9]);
        let p = softmax_probs(&f);
        let denom: f64 = f.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            assert_relative_eq!(p[k], f[k].exp() / denom, max_relative = 1e-12);
        }
    }

    #[test]
    fn hessian_blocks_annihilate_ones() {
        let p = softmax_probs(&DVector::from_row_slice(&[0.5, -0.3, 1.1]));
        let w = DMatrix::from_diagonal(&p) - &p * p.transpose();
        let ones = DVector::from_element(3, 1.0);
        assert!((w * ones).abs().max() < 1e-15);
    }

    #[test]
    fn single_observation_mode_is_stationary() {
        let data = crate::LabeledDataset::new(DMatrix::zeros(1, 1), vec![0], 3).unwrap();
        let theta = Hyperparams::isotropic(0.0, 0.0);
        let st = newton_mode(&data, &theta, 1e-10, 50).unwrap();
        assert!(st.converged);
        assert!(st.residual < 1e-10);
        // Mode pulls toward the observed class.
        assert!(st.mode[(0, 0)] > 0.0);
        // Monotone objective.
        for w in st.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn tiny_magnitude_shrinks_mode_to_zero() {
        let data = crate::synth::three_class_line(9, 4);
        let theta = Hyperparams::isotropic(-12.0, 0.0);
        let st = newton_mode(&data, &theta, 1e-10, 50).unwrap();
        assert!(st.mode.abs().max() < 1e-4);
    }

    #[test]
    fn la_predict_is_reproducible_and_sane() {
        let data = crate::synth::three_class_line(12, 5);
        let theta = Hyperparams::isotropic(1.0, 0.0);
        let st = newton_mode(&data, &theta, 1e-10, 60).unwrap();
        let a = la_predict(&st, &data.x, &theta, &[-1.0], 2000, 9).unwrap();
        let b = la_predict(&st, &data.x, &theta, &[-1.0], 2000, 9).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.sum(), 1.0, max_relative = 1e-12);
        // Far from the data the belief reverts to the symmetric prior.
        let far = la_predict(&st, &data.x, &theta, &[500.0], 20000, 9).unwrap();
        for k in 0..3 {
            assert!((far[k] - 1.0 / 3.0).abs() < 0.02, "far prob {}", far[k]);
        }
    }

    #[test]
    fn dominated_latent_predicts_its_class() {
        let mean = DVector::from_row_slice(&[10.0, 0.0, 0.0]);
        let cov = DMatrix::identity(3, 3) * 1e-6;
        let p = mc_softmax_average(&mean, &cov, 500, 3).unwrap();
        assert!(p[0] > 0.999);
    }

    #[test]
    fn symmetric_one_point_tkp_is_uniform() {
        let data = crate::LabeledDataset::new(DMatrix::zeros(1, 1), vec![1], 3).unwrap();
        let theta = Hyperparams::isotropic(0.5, 0.0);
        let base = newton_mode(&data, &theta, 1e-10, 60).unwrap();
        let pred = la_tkp_predict(&data, &theta, &base, &[1000.0], &TkpOptions::default()).unwrap();
        assert!(!pred.fallback);
        for k in 0..3 {
            assert!((pred.probs[k] - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(pred.raw_sum > 0.9 && pred.raw_sum < 1.1);
    }
}
