//! Gibbs sampler for the auxiliary-variable representation of the
//! multinomial probit model at fixed hyperparameters.
//!
//! Each observation's auxiliary vector lives in the cone where the labeled
//! class's coordinate is maximal; the sampler alternates conic truncated
//! Gaussian draws for the auxiliaries with exact multivariate Gaussian draws
//! for the latents. Chains are bitwise reproducible given a seed and serve
//! as the ground-truth oracle for the deterministic approximations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernel::{cross_covariance, jittered_covariance, Hyperparams, JITTER_REL};
use crate::normal::norm_cdf;
use crate::par;

/// Sampler options; the defaults give 20k post-burn-in iterations thinned
/// to 4k retained draws.
#[derive(Debug, Clone)]
pub struct GibbsOptions {
    /// Retained draws after thinning.
    pub samples: usize,
    /// Discarded initial iterations.
    pub burn_in: usize,
    /// Keep every `thin`'th post-burn-in draw.
    pub thin: usize,
    pub seed: u64,
    /// Coordinate-Gibbs scans per auxiliary update.
    pub cone_scans: usize,
    /// Auxiliary-variable draws per likelihood evaluation in summaries.
    pub u_draws: usize,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self {
            samples: 4000,
            burn_in: 2000,
            thin: 5,
            seed: 0,
            cone_scans: 5,
            u_draws: 16,
        }
    }
}

/// Draw from the standard normal truncated to `z > a`. Returns the draw and
/// the number of proposals consumed.
fn std_trunc_lower<R: Rng>(a: f64, rng: &mut R) -> (f64, u64) {
    let mut attempts = 0u64;
    if a < 0.45 {
        loop {
            attempts += 1;
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                return (z, attempts);
            }
        }
    }
    // Exponential-proposal rejection for deep truncation.
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        attempts += 1;
        let e: f64 = rng.gen::<f64>();
        let z = a - (1.0 - e).ln() / lambda;
        let accept = (-0.5 * (z - lambda) * (z - lambda)).exp();
        if rng.gen::<f64>() < accept {
            return (z, attempts);
        }
    }
}

/// Draw from `N(mu, 1)` truncated to `x > lo`.
fn trunc_normal_lower<R: Rng>(mu: f64, lo: f64, rng: &mut R) -> (f64, u64) {
    let (z, n) = std_trunc_lower(lo - mu, rng);
    (mu + z, n)
}

/// Draw from `N(mu, 1)` truncated to `x < hi`.
fn trunc_normal_upper<R: Rng>(mu: f64, hi: f64, rng: &mut R) -> (f64, u64) {
    let (z, n) = std_trunc_lower(mu - hi, rng);
    (mu - z, n)
}

/// In-place coordinate-Gibbs scans of the cone-truncated Gaussian
/// `N(v | f, I)` restricted to `v[label] > v[k]` for all `k != label`.
/// `v` must already satisfy the constraint.
pub fn cone_scan<R: Rng>(
    f: &DVector<f64>,
    label: usize,
    v: &mut DVector<f64>,
    scans: usize,
    rng: &mut R,
) -> u64 {
    let c = f.len();
    let mut attempts = 0u64;
    for _ in 0..scans {
        for k in 0..c {
            if k != label {
                let (x, n) = trunc_normal_upper(f[k], v[label], rng);
                v[k] = x;
                attempts += n;
            }
        }
        let bound = (0..c)
            .filter(|&k| k != label)
            .map(|k| v[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let (x, n) = trunc_normal_lower(f[label], bound, rng);
        v[label] = x;
        attempts += n;
    }
    attempts
}

/// One conic truncated Gaussian draw: initializes inside the cone and runs
/// five coordinate scans.
pub fn sample_auxiliary<R: Rng>(f: &DVector<f64>, label: usize, rng: &mut R) -> DVector<f64> {
    let c = f.len();
    let mut v = DVector::zeros(c);
    let mut bound = f64::NEG_INFINITY;
    for k in 0..c {
        if k != label {
            v[k] = f[k] + rng.sample::<f64, _>(StandardNormal);
            bound = bound.max(v[k]);
        }
    }
    let (x, _) = trunc_normal_lower(f[label], bound, rng);
    v[label] = x;
    cone_scan(f, label, &mut v, 5, rng);
    v
}

/// Cached factorizations for exact draws from `p(f | v)`, which per class is
/// `N(K (K+I)^{-1} v, K - K (K+I)^{-1} K)`.
pub struct LatentSampler {
    post_cov: DMatrix<f64>,
    post_chol: Cholesky<f64, Dyn>,
}

impl LatentSampler {
    pub fn new(k_eff: &DMatrix<f64>) -> Result<Self> {
        let n = k_eff.nrows();
        let mut kpi = k_eff.clone();
        for i in 0..n {
            kpi[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(kpi)
            .ok_or_else(|| Error::Factorization("K + I not positive definite".into()))?;
        let mut post_cov = chol.solve(k_eff);
        post_cov = (&post_cov + post_cov.transpose()) * 0.5;
        let post_chol = Cholesky::new(post_cov.clone())
            .ok_or_else(|| Error::Factorization("latent conditional covariance".into()))?;
        Ok(Self {
            post_cov,
            post_chol,
        })
    }

    /// Conditional mean `K (K+I)^{-1} v` (equals `post_cov * v`).
    pub fn conditional_mean(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.post_cov * v
    }

    pub fn conditional_cov(&self) -> &DMatrix<f64> {
        &self.post_cov
    }

    pub fn draw<R: Rng>(&self, v: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let n = v.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.conditional_mean(v) + self.post_chol.l() * z
    }
}

/// One exact draw of all latents given auxiliaries (`v` and the result are
/// `n x c`, classes in columns).
pub fn sample_latents<R: Rng>(
    v: &DMatrix<f64>,
    k_eff: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let sampler = LatentSampler::new(k_eff)?;
    let mut f = DMatrix::zeros(v.nrows(), v.ncols());
    for class in 0..v.ncols() {
        f.set_column(class, &sampler.draw(&v.column(class).into_owned(), rng));
    }
    Ok(f)
}

/// A completed chain.
pub struct GibbsChain {
    /// Retained latent draws, each `n x c`.
    pub f_samples: Vec<DMatrix<f64>>,
    pub seed: u64,
    pub burn_in: usize,
    pub thin: usize,
    /// Total proposals consumed by the truncated draws.
    pub trunc_proposals: u64,
    /// Total truncated draws made.
    pub trunc_draws: u64,
}

/// Moment and predictive summaries of a chain.
pub struct GibbsSummary {
    /// Posterior mean per observation and class.
    pub site_means: DMatrix<f64>,
    /// Posterior covariance per observation (`c x c` each).
    pub site_covs: Vec<DMatrix<f64>>,
    /// Posterior predictive probability of each class at every training
    /// point, by averaging the likelihood over the chain.
    pub train_probs: DMatrix<f64>,
}

/// Runs the sampler and produces moment summaries.
pub fn run_gibbs(
    data: &LabeledDataset,
    theta: &Hyperparams,
    opts: &GibbsOptions,
) -> Result<(GibbsChain, GibbsSummary)> {
    if opts.samples == 0 || opts.thin == 0 {
        return Err(Error::InvalidInput("need samples >= 1 and thin >= 1".into()));
    }
    let n = data.len();
    let c = data.num_classes;
    let k_eff = jittered_covariance(&data.x, theta)?;
    let sampler = LatentSampler::new(&k_eff)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut f = DMatrix::zeros(n, c);
    let mut v = DMatrix::zeros(n, c);
    for i in 0..n {
        let vi = sample_auxiliary(&f.row(i).transpose(), data.y[i], &mut rng);
        for k in 0..c {
            v[(i, k)] = vi[k];
        }
    }

    let total = opts.burn_in + opts.samples * opts.thin;
    let mut chain = GibbsChain {
        f_samples: Vec::with_capacity(opts.samples),
        seed: opts.seed,
        burn_in: opts.burn_in,
        thin: opts.thin,
        trunc_proposals: 0,
        trunc_draws: 0,
    };
    for it in 0..total {
        for i in 0..n {
            let fi = f.row(i).transpose();
            let mut vi = v.row(i).transpose();
            let attempts = cone_scan(&fi, data.y[i], &mut vi, opts.cone_scans, &mut rng);
            chain.trunc_proposals += attempts;
            chain.trunc_draws += (opts.cone_scans * c) as u64;
            for k in 0..c {
                v[(i, k)] = vi[k];
            }
        }
        for class in 0..c {
            f.set_column(class, &sampler.draw(&v.column(class).into_owned(), &mut rng));
        }
        if it >= opts.burn_in && (it - opts.burn_in) % opts.thin == opts.thin - 1 {
            chain.f_samples.push(f.clone());
        }
    }

    let summary = summarize(&chain, data, opts)?;
    Ok((chain, summary))
}

fn summarize(
    chain: &GibbsChain,
    data: &LabeledDataset,
    opts: &GibbsOptions,
) -> Result<GibbsSummary> {
    let n = data.len();
    let c = data.num_classes;
    let s = chain.f_samples.len();
    if s == 0 {
        return Err(Error::InvalidInput("empty chain".into()));
    }
    let mut site_means = DMatrix::zeros(n, c);
    for draw in &chain.f_samples {
        site_means += draw;
    }
    site_means /= s as f64;
    let mut site_covs = vec![DMatrix::zeros(c, c); n];
    for draw in &chain.f_samples {
        for (i, cov) in site_covs.iter_mut().enumerate() {
            let d = draw.row(i).transpose() - site_means.row(i).transpose();
            *cov += &d * d.transpose();
        }
    }
    for cov in &mut site_covs {
        *cov /= (s - 1).max(1) as f64;
    }

    // Likelihood averaging over the chain; the auxiliary integral of each
    // likelihood evaluation is itself estimated by Monte Carlo.
    let per_draw = par::map_indexed(s, |si| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(chain.seed ^ 0x7472 ^ (si as u64).wrapping_mul(0x9e37_79b9));
        let draw = &chain.f_samples[si];
        let mut acc = DMatrix::zeros(n, c);
        for i in 0..n {
            let fi = draw.row(i).transpose();
            for _ in 0..opts.u_draws {
                let u: f64 = rng.sample(StandardNormal);
                for y in 0..c {
                    let mut w = 1.0;
                    for j in 0..c {
                        if j != y {
                            w *= norm_cdf(u + fi[y] - fi[j]);
                        }
                    }
                    acc[(i, y)] += w;
                }
            }
        }
        acc
    });
    let mut train_probs = DMatrix::zeros(n, c);
    for a in per_draw {
        train_probs += a;
    }
    train_probs /= (s * opts.u_draws) as f64;
    for i in 0..n {
        let row_sum: f64 = (0..c).map(|k| train_probs[(i, k)]).sum();
        for k in 0..c {
            train_probs[(i, k)] /= row_sum;
        }
    }

    Ok(GibbsSummary {
        site_means,
        site_covs,
        train_probs,
    })
}

/// Posterior predictive class probabilities at each row of `xstar`, by
/// drawing the test latents conditional on every retained chain draw and
/// averaging the likelihood.
pub fn gibbs_predict(
    chain: &GibbsChain,
    data: &LabeledDataset,
    theta: &Hyperparams,
    xstar: &DMatrix<f64>,
    u_draws: usize,
) -> Result<DMatrix<f64>> {
    let c = data.num_classes;
    let m = xstar.nrows();
    let k_eff = jittered_covariance(&data.x, theta)?;
    let chol = Cholesky::new(k_eff)
        .ok_or_else(|| Error::Factorization("prior covariance not SPD".into()))?;
    let kstar = cross_covariance(&data.x, xstar, theta)?;
    let w = chol.solve(&kstar);
    let kss = theta.sigma2() * (1.0 + JITTER_REL);
    let mut cond_sd = DVector::zeros(m);
    for j in 0..m {
        let var = (kss - kstar.column(j).dot(&w.column(j))).max(1e-12 * kss);
        cond_sd[j] = var.sqrt();
    }

    let s = chain.f_samples.len();
    let per_draw = par::map_indexed(s, |si| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(chain.seed ^ 0x7072 ^ (si as u64).wrapping_mul(0x9e37_79b9));
        let draw = &chain.f_samples[si];
        let mut acc = DMatrix::zeros(m, c);
        for j in 0..m {
            let mut fstar = DVector::zeros(c);
            for class in 0..c {
                let mean = draw.column(class).dot(&w.column(j));
                fstar[class] = mean + cond_sd[j] * rng.sample::<f64, _>(StandardNormal);
            }
            for _ in 0..u_draws {
                let u: f64 = rng.sample(StandardNormal);
                for y in 0..c {
                    let mut prod = 1.0;
                    for k in 0..c {
                        if k != y {
                            prod *= norm_cdf(u + fstar[y] - fstar[k]);
                        }
                    }
                    acc[(j, y)] += prod;
                }
            }
        }
        acc
    });
    let mut probs = DMatrix::zeros(m, c);
    for a in per_draw {
        probs += a;
    }
    probs /= (s * u_draws) as f64;
    for j in 0..m {
        let row_sum: f64 = (0..c).map(|k| probs[(j, k)]).sum();
        for k in 0..c {
            probs[(j, k)] /= row_sum;
        }
    }
    Ok(probs)
}

/// Largest standardized difference between split-half means; a smoke test
/// for stationarity. Standard errors come from batch means, so serially
/// correlated draws do not inflate the statistic.
pub fn split_half_max_z(chain: &GibbsChain) -> f64 {
    let s = chain.f_samples.len();
    let half = s / 2;
    let (n, c) = (chain.f_samples[0].nrows(), chain.f_samples[0].ncols());
    let batches = 16.min(half / 4).max(2);
    let mean_and_se = |values: &[f64]| -> (f64, f64) {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let per_batch = values.len() / batches;
        let batch_means: Vec<f64> = (0..batches)
            .map(|b| {
                values[b * per_batch..(b + 1) * per_batch]
                    .iter()
                    .sum::<f64>()
                    / per_batch as f64
            })
            .collect();
        let bv = batch_means
            .iter()
            .map(|x| (x - m) * (x - m))
            .sum::<f64>()
            / (batches - 1) as f64;
        (m, (bv / batches as f64).sqrt())
    };
    let mut worst = 0.0f64;
    for i in 0..n {
        for k in 0..c {
            let first: Vec<f64> = (0..half).map(|si| chain.f_samples[si][(i, k)]).collect();
            let second: Vec<f64> = (half..s).map(|si| chain.f_samples[si][(i, k)]).collect();
            let (m1, se1) = mean_and_se(&first);
            let (m2, se2) = mean_and_se(&second);
            let se = (se1 * se1 + se2 * se2).sqrt();
            if se > 0.0 {
                worst = worst.max((m1 - m2).abs() / se);
            }
        }
    }
    worst
}
