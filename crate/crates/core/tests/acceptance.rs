//! Acceptance suite: every check prints one PASS/FAIL line. Run with
//! `cargo test --test acceptance -p gpmc-core --release -- --nocapture`.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gpmc_core::ep::{
    log_marginal, log_marginal_grad, refresh_posterior, run_ep, site_location, site_precision,
    EpMode, EpOptions, InnerMode, StructuredSite,
};
use gpmc_core::gibbs::{run_gibbs, GibbsOptions};
use gpmc_core::inner::{tilted_moments, SiteState, MAX_INNER_SWEEPS};
use gpmc_core::kernel::jittered_covariance;
use gpmc_core::laplace::{
    la_predict, la_tkp_predict, newton_mode, TkpOptions, NEWTON_MAX_ITER, NEWTON_TOL,
    PREDICT_DRAWS,
};
use gpmc_core::normal::log_norm_cdf;
use gpmc_core::par;
use gpmc_core::predict::{class_probabilities, latent_predict, predict_batch};
use gpmc_core::synth::{max_margin_index, noisy_stripes, separable_blobs, three_class_line};
use gpmc_core::{Hyperparams, LabeledDataset};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn random_spd_cavity(c: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-0.7..0.7));
    let cov = &a * a.transpose() + DMatrix::identity(c, c) * rng.gen_range(0.3..1.2);
    let mean = DVector::from_fn(c, |_, _| rng.gen_range(-1.5..1.5));
    (mean, cov)
}

fn random_instance(n: usize, c: usize, d: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
    let y = (0..n).map(|_| rng.gen_range(0..c)).collect();
    LabeledDataset::new(x, y, c).unwrap()
}

/// Random inner sites for one dataset, plus the structured form.
fn random_sites(
    data: &LabeledDataset,
    rng: &mut ChaCha8Rng,
) -> (Vec<SiteState>, Vec<StructuredSite>) {
    let c = data.num_classes;
    let inner: Vec<SiteState> = (0..data.len())
        .map(|_| SiteState {
            tau: (0..c - 1).map(|_| rng.gen_range(0.0..3.0)).collect(),
            nu: (0..c - 1).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        })
        .collect();
    let structured = inner
        .iter()
        .zip(&data.y)
        .map(|(s, &y)| StructuredSite::from_inner(s, y))
        .collect();
    (inner, structured)
}

#[test]
fn criterion_01_structured_vs_dense_equivalence() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + trial);
        let n = rng.gen_range(5..=15);
        let c = if trial % 2 == 0 { 3 } else { 4 };
        let data = random_instance(n, c, 2, 20_000 + trial);
        let theta = Hyperparams::isotropic(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..0.5));
        let k = jittered_covariance(&data.x, &theta).unwrap();
        let (inner, structured) = random_sites(&data, &mut rng);
        let state = refresh_posterior(&k, &structured).unwrap();
        let dense = common::dense_posterior(&k, state.pi(), state.site_location(), true);
        for i in 0..n {
            worst = worst.max((state.marginal_mean(i) - dense.marginal_mean(i)).abs().max());
            worst = worst.max((state.marginal_cov(i) - dense.marginal_cov(i)).abs().max());
        }
        worst = worst.max((state.logdet() - dense.logdet).abs());
        let blocked_z = log_marginal(&state, &inner, &data.y).unwrap();
        let dense_z = common::dense_log_marginal(&k, &state, &inner, &data.y);
        worst = worst.max((blocked_z - dense_z).abs());
    }
    verdict(
        "structured-vs-dense equivalence",
        worst < 1e-8 && start.elapsed().as_secs() < 60,
        &format!(
            "max abs diff {worst:.3e} over 50 instances in {:.1?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_02_site_structure_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.gen_range(3..=5);
        let label = rng.gen_range(0..c);
        let tau: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(0.01..6.0)).collect();
        let nu: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, big_pi) = site_precision(&tau, label);
        let loc = site_location(&tau, &nu, label);
        let ones = DVector::from_element(c, 1.0);
        worst = worst.max((&big_pi * &ones).abs().max());
        worst = worst.max(loc.sum().abs());
        // Dense rank-deficient form Z (T^{-1} + 1 1')^{-1} Z'.
        let m = c - 1;
        let mut z = DMatrix::zeros(c, m);
        let mut s = 0;
        for j in 0..c {
            if j != label {
                z[(label, s)] = 1.0;
                z[(j, s)] = -1.0;
                s += 1;
            }
        }
        let mut inner = DMatrix::from_element(m, m, 1.0);
        for s in 0..m {
            inner[(s, s)] += 1.0 / tau[s];
        }
        let dense = &z * inner.try_inverse().unwrap() * z.transpose();
        worst = worst.max((&big_pi - &dense).abs().max());
    }
    verdict(
        "site-structure identities",
        worst < 1e-12,
        &format!("max violation {worst:.3e} over 1000 sites"),
    );
}

/// Plain Monte Carlo of the augmented tilted integral with preallocated
/// buffers; chunked with per-chunk seeds so the estimate is independent of
/// the execution schedule.
fn mc_tilted_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    label: usize,
    samples: usize,
    seed: u64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let c = mean.len();
    let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
    let l = chol.l();
    const CHUNK: usize = 1 << 16;
    let chunks = samples.div_ceil(CHUNK);
    let partials = par::map_indexed(chunks, |chunk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (chunk as u64).wrapping_mul(0x9e37_79b9));
        let count = CHUNK.min(samples - chunk * CHUNK);
        let mut w_sum = 0.0f64;
        let mut m_sum = vec![0.0f64; c];
        let mut c_sum = vec![0.0f64; c * c];
        let mut f = vec![0.0f64; c];
        let mut z = vec![0.0f64; c];
        for _ in 0..count {
            for zk in z.iter_mut() {
                *zk = rng.sample(StandardNormal);
            }
            for i in 0..c {
                let mut v = mean[i];
                for j in 0..=i {
                    v += l[(i, j)] * z[j];
                }
                f[i] = v;
            }
            let u: f64 = rng.sample(StandardNormal);
            let mut w = 1.0;
            for j in 0..c {
                if j != label {
                    w *= gpmc_core::normal::norm_cdf(u + f[label] - f[j]);
                }
            }
            w_sum += w;
            for i in 0..c {
                m_sum[i] += w * f[i];
                for j in 0..c {
                    c_sum[i * c + j] += w * f[i] * f[j];
                }
            }
        }
        (w_sum, m_sum, c_sum)
    });
    let mut w_tot = 0.0;
    let mut m_tot = vec![0.0f64; c];
    let mut c_tot = vec![0.0f64; c * c];
    for (w, m, cc) in partials {
        w_tot += w;
        for i in 0..c {
            m_tot[i] += m[i];
        }
        for i in 0..c * c {
            c_tot[i] += cc[i];
        }
    }
    let z_hat = w_tot / samples as f64;
    let m_hat = DVector::from_fn(c, |i, _| m_tot[i] / w_tot);
    let cov_hat = DMatrix::from_fn(c, c, |i, j| c_tot[i * c + j] / w_tot - m_hat[i] * m_hat[j]);
    (z_hat, m_hat, cov_hat)
}

#[test]
fn criterion_03_tilted_moment_fidelity() {
    let start = std::time::Instant::now();
    let mut worst_z = 0.0f64;
    let mut worst_m = 0.0f64;
    let mut worst_c = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + trial);
        let c = 3 + (trial % 3) as usize;
        // Unit-scale cavities: the absolute tolerances below presuppose
        // order-one variances.
        let a = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-0.7..0.7)) / (c as f64).sqrt();
        let cov = &a * a.transpose() + DMatrix::identity(c, c) * rng.gen_range(0.4..0.9);
        let mean = DVector::from_fn(c, |_, _| rng.gen_range(-1.2..1.2));
        let label = rng.gen_range(0..c);
        let (res, _) = tilted_moments(
            &mean,
            &cov,
            label,
            &SiteState::vacuous(c),
            1.0,
            MAX_INNER_SWEEPS,
        )
        .unwrap();
        let (z_mc, m_mc, c_mc) =
            mc_tilted_oracle(&mean, &cov, label, 10_000_000, 40_000 + trial);
        worst_z = worst_z.max((res.log_z.exp() - z_mc).abs() / z_mc);
        worst_m = worst_m.max((&res.mean - &m_mc).abs().max());
        worst_c = worst_c.max((&res.cov - &c_mc).abs().max());
    }
    verdict(
        "tilted-moment fidelity vs Monte Carlo",
        worst_z < 0.01 && worst_m < 0.01 && worst_c < 0.02 && start.elapsed().as_secs() < 300,
        &format!(
            "normalizer rel {worst_z:.4}, mean abs {worst_m:.4}, cov abs {worst_c:.4} in {:.1?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_04_binary_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (mean, cov) = random_spd_cavity(2, &mut rng);
        let label = rng.gen_range(0..2);
        let (res, _) = tilted_moments(
            &mean,
            &cov,
            label,
            &SiteState::vacuous(2),
            1.0,
            MAX_INNER_SWEEPS,
        )
        .unwrap();
        // Closed form on the augmented projection z = [e_y - e_j; 1].
        let other = 1 - label;
        let proj_mean = mean[label] - mean[other];
        let proj_var =
            cov[(label, label)] + cov[(other, other)] - 2.0 * cov[(label, other)] + 1.0;
        let exact = log_norm_cdf(proj_mean / (1.0 + proj_var).sqrt());
        worst = worst.max((res.log_z - exact).abs());
    }
    verdict(
        "binary-case exact normalizer",
        worst < 1e-12,
        &format!("max abs err {worst:.3e} over 100 cavities"),
    );
}

#[test]
fn criterion_05_evidence_gradient() {
    let start = std::time::Instant::now();
    let opts = EpOptions {
        outer_tol: 1e-10,
        max_outer: 300,
        ..EpOptions::default()
    };
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let data = random_instance(6, 3, 2, 50_000 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(60_000 + trial);
        let theta = Hyperparams::new(
            rng.gen_range(-0.5..1.0),
            vec![rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
        )
        .unwrap();
        let fit = run_ep(&data, &theta, &opts).unwrap();
        let grad = log_marginal_grad(&fit, &data, &theta).unwrap();
        let h = 1e-4;
        for which in 0..theta.num_params() {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[which] += h;
            dn[which] -= h;
            let f_up = run_ep(&data, &Hyperparams::from_vec(&up).unwrap(), &opts)
                .unwrap()
                .log_z;
            let f_dn = run_ep(&data, &Hyperparams::from_vec(&dn).unwrap(), &opts)
                .unwrap()
                .log_z;
            let fd = (f_up - f_dn) / (2.0 * h);
            worst = worst.max((fd - grad.grad[which]).abs() / fd.abs().max(1e-6));
        }
    }
    verdict(
        "evidence gradient vs finite differences",
        worst < 1e-3 && start.elapsed().as_secs() < 120,
        &format!(
            "max rel err {worst:.3e} over 10 instances in {:.1?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_06_ep_vs_gibbs_agreement() {
    let start = std::time::Instant::now();
    let data = three_class_line(30, 2024);
    let theta = Hyperparams::isotropic(4.62, 0.26);
    let n = data.len();
    let c = data.num_classes;

    let full = run_ep(&data, &theta, &EpOptions::default()).unwrap();
    let iep = run_ep(
        &data,
        &theta,
        &EpOptions {
            mode: EpMode::Independent,
            max_outer: 3000,
            ..EpOptions::default()
        },
    )
    .unwrap();

    // Pool several independent chains so the sampler noise sits well below
    // the tolerance being checked (160k retained draws total).
    let chains = 8usize;
    let summaries = par::map_indexed(chains, |ci| {
        let opts = GibbsOptions {
            samples: 20_000,
            burn_in: 4000,
            thin: 5,
            seed: 1000 + ci as u64,
            ..Default::default()
        };
        run_gibbs(&data, &theta, &opts).unwrap().1
    });
    let mut pooled_mean = DMatrix::zeros(n, c);
    for s in &summaries {
        pooled_mean += &s.site_means;
    }
    pooled_mean /= chains as f64;
    let mut pooled_var = DMatrix::zeros(n, c);
    let mut pooled_train = DMatrix::zeros(n, c);
    for s in &summaries {
        pooled_train += &s.train_probs;
        for i in 0..n {
            for k in 0..c {
                let dm = s.site_means[(i, k)] - pooled_mean[(i, k)];
                pooled_var[(i, k)] += s.site_covs[i][(k, k)] + dm * dm;
            }
        }
    }
    pooled_var /= chains as f64;
    pooled_train /= chains as f64;

    let mut worst_mean = 0.0f64;
    let mut worst_var: f64 = 1.0;
    for i in 0..n {
        let em = full.posterior.marginal_mean(i);
        let ec = full.posterior.marginal_cov(i);
        for k in 0..c {
            let sd = pooled_var[(i, k)].sqrt();
            worst_mean = worst_mean.max((em[k] - pooled_mean[(i, k)]).abs() / sd);
            let r: f64 = ec[(k, k)] / pooled_var[(i, k)];
            if (r - 1.0).abs() > (worst_var - 1.0).abs() {
                worst_var = r;
            }
        }
    }

    let idx = max_margin_index(&data);
    let y = data.y[idx];
    let x = vec![data.x[(idx, 0)]];
    let (m1, c1) = latent_predict(&full.posterior, &data.x, &theta, &x).unwrap();
    let (p_full, _, _) = class_probabilities(&m1, &c1).unwrap();
    let (m2, c2) = latent_predict(&iep.posterior, &data.x, &theta, &x).unwrap();
    let (p_iep, _, _) = class_probabilities(&m2, &c2).unwrap();
    let p_gibbs = pooled_train[(idx, y)];

    let ordering = p_gibbs >= p_full[y] && p_full[y] >= p_iep[y];
    verdict(
        "EP-vs-Gibbs agreement and confidence ordering",
        worst_mean < 0.15
            && (worst_var - 1.0).abs() < 0.25
            && ordering
            && start.elapsed().as_secs() < 600,
        &format!(
            "mean dev {worst_mean:.3} sd, var ratio {worst_var:.3}, probs gibbs {:.3} >= ep {:.3} >= iep {:.3} in {:.1?}",
            p_gibbs, p_full[y], p_iep[y], start.elapsed()
        ),
    );
}

#[test]
fn criterion_07_standard_vs_incremental_fixed_point() {
    let mut worst = 0.0f64;
    let mut sweeps_ok = true;
    for trial in 0..10u64 {
        let data = random_instance(8, 3, 1, 70_000 + trial);
        let theta = Hyperparams::isotropic(0.8, 0.2);
        let std_fit = run_ep(
            &data,
            &theta,
            &EpOptions {
                inner_mode: InnerMode::Standard,
                outer_tol: 1e-9,
                ..EpOptions::default()
            },
        )
        .unwrap();
        let inc_fit = run_ep(
            &data,
            &theta,
            &EpOptions {
                inner_mode: InnerMode::Incremental,
                outer_tol: 1e-9,
                ..EpOptions::default()
            },
        )
        .unwrap();
        for i in 0..data.len() {
            worst = worst.max(
                (std_fit.posterior.marginal_mean(i) - inc_fit.posterior.marginal_mean(i))
                    .abs()
                    .max(),
            );
            worst = worst.max(
                (std_fit.posterior.marginal_cov(i) - inc_fit.posterior.marginal_cov(i))
                    .abs()
                    .max(),
            );
        }
        sweeps_ok &=
            inc_fit.diagnostics.inner_sweep_count < std_fit.diagnostics.inner_sweep_count;
    }
    verdict(
        "standard vs incremental inner schedule",
        worst < 1e-6 && sweeps_ok,
        &format!("max marginal diff {worst:.3e}, incremental always used fewer inner sweeps"),
    );
}

#[test]
fn criterion_08_convergence_behavior() {
    let start = std::time::Instant::now();
    let data = three_class_line(30, 2024);
    let theta = Hyperparams::isotropic(8.0, 2.5);
    let run = |mode: EpMode, damping: f64, max_outer: usize| {
        run_ep(
            &data,
            &theta,
            &EpOptions {
                mode,
                damping,
                max_outer,
                adaptive_damping: false,
                ..EpOptions::default()
            },
        )
        .unwrap()
    };
    let ep_08 = run(EpMode::Full, 0.8, 2000);
    let iep_08 = run(EpMode::Independent, 0.8, 200_000);
    let ep_05 = run(EpMode::Full, 0.5, 2000);
    let iep_05 = run(EpMode::Independent, 0.5, 200_000);
    let pass = ep_08.diagnostics.converged
        && iep_08.diagnostics.converged
        && ep_08.diagnostics.sweeps() <= iep_08.diagnostics.sweeps()
        && ep_05.diagnostics.converged
        && iep_05.diagnostics.converged;
    verdict(
        "convergence behavior at a strongly coupled setting",
        pass,
        &format!(
            "sweeps at 0.8: full {} vs independent {}; at 0.5: full {} vs independent {} (both converged) in {:.1?}",
            ep_08.diagnostics.sweeps(),
            iep_08.diagnostics.sweeps(),
            ep_05.diagnostics.sweeps(),
            iep_05.diagnostics.sweeps(),
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_09_la_stationarity_and_tkp_coherence() {
    let start = std::time::Instant::now();
    let data = separable_blobs(18, 3, 2, 3.0, 77);
    let theta = Hyperparams::isotropic(2.0, 0.8);
    let base = newton_mode(&data, &theta, NEWTON_TOL, NEWTON_MAX_ITER).unwrap();
    let stationary = base.converged && base.residual < 1e-8;

    let (_, summary) = run_gibbs(
        &data,
        &theta,
        &GibbsOptions {
            samples: 8000,
            burn_in: 2000,
            thin: 5,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();

    let mut la_err = 0.0;
    let mut tkp_err = 0.0;
    let mut sums_ok = true;
    for i in 0..data.len() {
        let x: Vec<f64> = (0..2).map(|j| data.x[(i, j)]).collect();
        let y = data.y[i];
        let g = summary.train_probs[(i, y)];
        let la = la_predict(&base, &data.x, &theta, &x, PREDICT_DRAWS, 11).unwrap();
        let tkp = la_tkp_predict(&data, &theta, &base, &x, &TkpOptions::default()).unwrap();
        la_err += (la[y] - g).abs();
        tkp_err += (tkp.probs[y] - g).abs();
        sums_ok &= !tkp.fallback && tkp.raw_sum > 0.9 && tkp.raw_sum < 1.1;
    }
    la_err /= data.len() as f64;
    tkp_err /= data.len() as f64;
    verdict(
        "Laplace stationarity and extended-marginal coherence",
        stationary && sums_ok && tkp_err <= la_err,
        &format!(
            "residual {:.1e}; mean |corrected - sampler| {tkp_err:.4} <= |plain - sampler| {la_err:.4} in {:.1?}",
            base.residual,
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_10_evidence_calibration() {
    let start = std::time::Instant::now();
    let train = noisy_stripes(60, 555);
    let test = noisy_stripes(900, 556);
    let steps = 7;
    let (l_lo, l_hi) = (-2.5, 2.0);
    let (s_lo, s_hi) = (-1.0, 11.0);
    let mut best_ev = (f64::NEG_INFINITY, 0usize, 0usize);
    let mut best_ml = (f64::NEG_INFINITY, 0usize, 0usize);
    for li in 0..steps {
        let ll = l_lo + (l_hi - l_lo) * li as f64 / (steps - 1) as f64;
        let mut warm = None;
        for si in 0..steps {
            let lm = s_lo + (s_hi - s_lo) * si as f64 / (steps - 1) as f64;
            let theta = Hyperparams::isotropic(lm, ll);
            let fit =
                gpmc_core::ep::run_ep_warm(&train, &theta, &EpOptions::default(), warm.as_ref())
                    .unwrap();
            warm = Some(fit.warm_start());
            let preds = predict_batch(&fit.posterior, &train.x, &theta, &test.x).unwrap();
            let mlpd: f64 = preds
                .iter()
                .zip(&test.y)
                .map(|(p, &y)| p.probs[y].ln())
                .sum::<f64>()
                / test.y.len() as f64;
            if fit.log_z > best_ev.0 {
                best_ev = (fit.log_z, li, si);
            }
            if mlpd > best_ml.0 {
                best_ml = (mlpd, li, si);
            }
        }
    }
    let dist = (best_ev.1 as i64 - best_ml.1 as i64)
        .abs()
        .max((best_ev.2 as i64 - best_ml.2 as i64).abs());
    verdict(
        "evidence calibration on a 7x7 grid",
        dist <= 1,
        &format!(
            "evidence argmax ({}, {}), test-score argmax ({}, {}), grid distance {dist} in {:.1?}",
            best_ev.1,
            best_ev.2,
            best_ml.1,
            best_ml.2,
            start.elapsed()
        ),
    );
}
