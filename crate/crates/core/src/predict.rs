//! Latent prediction and predictive class probabilities.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ep::PosteriorState;
use crate::error::{Error, Result};
use crate::inner::{self, SiteState, MAX_INNER_SWEEPS};
use crate::kernel::{cross_covariance, Hyperparams};
use crate::normal::norm_cdf;
use crate::par;

/// Fixed seed of the Monte Carlo fallback in [`class_probabilities`], so
/// repeated calls are bit-identical.
const MC_FALLBACK_SEED: u64 = 0x6d63_6661;
const MC_FALLBACK_SAMPLES: usize = 100_000;

/// Latent predictive distribution and class probabilities at one input.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pub latent_mean: DVector<f64>,
    pub latent_cov: DMatrix<f64>,
    /// Class probabilities, renormalized to the simplex.
    pub probs: DVector<f64>,
    /// Sum of the per-class normalizers before renormalization; a quality
    /// indicator that should sit near 1.
    pub pre_norm_sum: f64,
    /// True when the inner EP failed for some class and the probabilities
    /// came from the seeded Monte Carlo fallback.
    pub mc_fallback: bool,
}

/// Latent predictive mean and covariance at a single test input.
pub fn latent_predict(
    state: &PosteriorState,
    x_train: &DMatrix<f64>,
    theta: &Hyperparams,
    xstar: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let xs = DMatrix::from_row_slice(1, xstar.len(), xstar);
    let kstar = cross_covariance(x_train, &xs, theta)?;
    let mut out = state
        .block
        .predict_latent(&kstar, theta.sigma2(), &state.block.zeta)?;
    Ok(out.pop().expect("one prediction"))
}

/// Class probabilities for a Gaussian latent belief, by evaluating each
/// candidate label's tilted normalizer with a cold-started inner EP run to
/// convergence, then renormalizing.
pub fn class_probabilities(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64, bool)> {
    let c = mean.len();
    let mut log_weights = Vec::with_capacity(c);
    let mut failed = false;
    for label in 0..c {
        match inner::tilted_moments(
            mean,
            cov,
            label,
            &SiteState::vacuous(c),
            1.0,
            MAX_INNER_SWEEPS,
        ) {
            Ok((tilted, _)) => log_weights.push(tilted.log_z),
            Err(_) => {
                failed = true;
                break;
            }
        }
    }
    if !failed {
        let weights: Vec<f64> = log_weights.iter().map(|lz| lz.exp()).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            let probs = DVector::from_fn(c, |k, _| weights[k] / total);
            return Ok((probs, total, false));
        }
    }
    let probs = mc_class_probabilities(mean, cov, MC_FALLBACK_SAMPLES, MC_FALLBACK_SEED)?;
    Ok((probs, 1.0, true))
}

/// Monte Carlo estimate of the multinomial-probit class probabilities for a
/// Gaussian latent belief: draws `(f, u)` jointly and averages the probit
/// products for every candidate class in one pass.
pub fn mc_class_probabilities(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let c = mean.len();
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Factorization("predictive covariance not SPD".into()))?;
    let l = chol.l();
    const CHUNK: usize = 8192;
    let chunks = samples.div_ceil(CHUNK);
    let partials = par::map_indexed(chunks, |chunk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (chunk as u64).wrapping_mul(0x9e37_79b9));
        let count = CHUNK.min(samples - chunk * CHUNK);
        let mut acc = vec![0.0f64; c];
        for _ in 0..count {
            let z = DVector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal));
            let f = mean + &l * z;
            let u: f64 = rng.sample(StandardNormal);
            for y in 0..c {
                let mut w = 1.0;
                for j in 0..c {
                    if j != y {
                        w *= norm_cdf(u + f[y] - f[j]);
                    }
                }
                acc[y] += w;
            }
        }
        acc
    });
    let mut totals = vec![0.0f64; c];
    for p in partials {
        for (t, v) in totals.iter_mut().zip(p) {
            *t += v;
        }
    }
    let sum: f64 = totals.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::NonFinite("Monte Carlo class probabilities".into()));
    }
    Ok(DVector::from_fn(c, |k, _| totals[k] / sum))
}

/// Predicts at every row of `xstar`, evaluating the blocked projection
/// factors once and reusing them for all test points.
pub fn predict_batch(
    state: &PosteriorState,
    x_train: &DMatrix<f64>,
    theta: &Hyperparams,
    xstar: &DMatrix<f64>,
) -> Result<Vec<PredictiveDistribution>> {
    let kstar = cross_covariance(x_train, xstar, theta)?;
    let latents = state
        .block
        .predict_latent(&kstar, theta.sigma2(), &state.block.zeta)?;
    let results = par::map_slice(&latents, |(mean, cov)| {
        let sym = (cov + cov.transpose()) * 0.5;
        class_probabilities(mean, &sym).map(|(probs, pre_norm_sum, mc_fallback)| {
            PredictiveDistribution {
                latent_mean: mean.clone(),
                latent_cov: sym,
                probs,
                pre_norm_sum,
                mc_fallback,
            }
        })
    });
    results.into_iter().collect()
}
