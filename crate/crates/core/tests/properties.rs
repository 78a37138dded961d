//! Property tests for the structural invariants.

use nalgebra::{Cholesky, DMatrix, DVector};
use proptest::prelude::*;

use gpmc_core::ep::{site_location, site_precision};
use gpmc_core::inner::{probit_site_moments, tilted_moments, SiteState};
use gpmc_core::predict::class_probabilities;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn site_precision_structure(
        tau in prop::collection::vec(0.0f64..20.0, 2..5),
        label_pick in 0usize..5,
    ) {
        let c = tau.len() + 1;
        let label = label_pick % c;
        let (pi, big_pi) = site_precision(&tau, label);
        let ones = DVector::from_element(c, 1.0);
        // Pi annihilates the ones vector exactly.
        prop_assert!((&big_pi * &ones).abs().max() < 1e-12);
        prop_assert!(pi[label] >= 1.0);
        prop_assert!(pi.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn site_location_orthogonality(
        tau in prop::collection::vec(0.0f64..20.0, 2..5),
        nu in prop::collection::vec(-10.0f64..10.0, 2..5),
        label_pick in 0usize..5,
    ) {
        let m = tau.len().min(nu.len());
        let c = m + 1;
        let label = label_pick % c;
        let loc = site_location(&tau[..m], &nu[..m], label);
        prop_assert!(loc.sum().abs() < 1e-12);
    }

    #[test]
    fn probit_moments_contract(
        mean in -12.0f64..12.0,
        var in 0.01f64..50.0,
    ) {
        let (log_z, _, vhat) = probit_site_moments(mean, var).unwrap();
        // Zhat in (0, 1) and the probit factor only removes variance. Deep
        // in the upper tail the reduction falls below one ulp, so strict
        // inequality is only checkable where it is representable.
        prop_assert!(log_z < 0.0);
        prop_assert!(log_z.is_finite());
        prop_assert!(vhat > 0.0 && vhat <= var);
        if mean / (1.0 + var).sqrt() < 8.0 {
            prop_assert!(vhat < var);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tilted_covariance_stays_positive_definite(
        seed in 0u64..1000,
        label in 0usize..3,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let a = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-0.8..0.8));
        let cov = &a * a.transpose() + DMatrix::identity(c, c) * 0.3;
        let mean = DVector::from_fn(c, |_, _| rng.gen_range(-2.0..2.0));
        let (res, _) = tilted_moments(&mean, &cov, label, &SiteState::vacuous(c), 1.0, 50).unwrap();
        prop_assert!(Cholesky::new(res.cov).is_some());
    }

    #[test]
    fn class_probability_normalizers_are_coherent(
        seed in 0u64..1000,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(2..=5);
        let a = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-0.7..0.7));
        let cov = &a * a.transpose() + DMatrix::identity(c, c) * 0.5;
        let scale = rng.gen_range(0.2..2.0);
        let mean = DVector::from_fn(c, |_, _| rng.gen_range(-5.0..5.0) * scale);
        let (probs, pre_norm, fallback) = class_probabilities(&mean, &cov).unwrap();
        prop_assert!(!fallback);
        // Per-class normalizers nearly tile the simplex before renormalizing.
        prop_assert!(pre_norm > 0.98 && pre_norm < 1.02, "pre-norm sum {}", pre_norm);
        prop_assert!((probs.sum() - 1.0).abs() < 1e-12);
        // Renormalization never moves the argmax.
        let arg_probs = probs.argmax().0;
        prop_assert!(probs[arg_probs] >= probs.max() - 1e-15);
    }
}
