//! Sampler-based cross-checks of the deterministic approximations.
//! Reduced-scale versions of the acceptance comparisons live here; the
//! full-scale runs are in the acceptance suite.

use gpmc_core::ep::{run_ep, EpOptions};
use gpmc_core::gibbs::{run_gibbs, split_half_max_z, GibbsOptions};
use gpmc_core::synth::three_class_line;
use gpmc_core::Hyperparams;

#[test]
fn ep_tracks_gibbs_moments() {
    let data = three_class_line(12, 61);
    let theta = Hyperparams::isotropic(1.5, 0.0);
    let fit = run_ep(&data, &theta, &EpOptions::default()).unwrap();
    let opts = GibbsOptions {
        samples: 2500,
        burn_in: 500,
        thin: 4,
        seed: 99,
        ..Default::default()
    };
    let (_, summary) = run_gibbs(&data, &theta, &opts).unwrap();
    for i in 0..data.len() {
        let ep_mean = fit.posterior.marginal_mean(i);
        let ep_cov = fit.posterior.marginal_cov(i);
        for k in 0..3 {
            let sd = summary.site_covs[i][(k, k)].sqrt();
            let dev = (ep_mean[k] - summary.site_means[(i, k)]).abs() / sd;
            assert!(dev < 0.3, "mean deviation {dev} sd at ({i},{k})");
            let vr = ep_cov[(k, k)] / summary.site_covs[i][(k, k)];
            assert!(vr > 0.6 && vr < 1.6, "variance ratio {vr} at ({i},{k})");
        }
    }
}

#[test]
fn interior_training_points_are_classified() {
    let data = three_class_line(15, 63);
    let theta = Hyperparams::isotropic(2.0, 0.0);
    let opts = GibbsOptions {
        samples: 1500,
        burn_in: 400,
        thin: 3,
        seed: 5,
        ..Default::default()
    };
    let (_, summary) = run_gibbs(&data, &theta, &opts).unwrap();
    // The left cluster (class 1 of the generator) is well separated; its
    // most isolated member must win its own classification.
    let idx = gpmc_core::synth::max_margin_index(&data);
    assert!(
        summary.train_probs[(idx, data.y[idx])] > 0.5,
        "p = {}",
        summary.train_probs[(idx, data.y[idx])]
    );
}

#[test]
fn split_halves_agree() {
    let data = three_class_line(9, 67);
    let theta = Hyperparams::isotropic(1.0, 0.0);
    let opts = GibbsOptions {
        samples: 2000,
        burn_in: 500,
        thin: 10,
        seed: 17,
        ..Default::default()
    };
    let (chain, _) = run_gibbs(&data, &theta, &opts).unwrap();
    let z = split_half_max_z(&chain);
    // Worst standardized split-half difference over 27 latent dimensions;
    // with thinned, near-independent draws 3 is the usual smoke threshold,
    // with slack for the multiple comparisons.
    assert!(z < 4.5, "split-half max z = {z}");
}
