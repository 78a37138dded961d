//! Optimizer contracts and the desk-scale grid cross-check.

use gpmc_core::ep::{run_ep, run_ep_warm, EpOptions};
use gpmc_core::hyperopt::{
    median_distance_log, objective, optimize, optimize_multistart, HyperPrior, Method,
    ObjectiveContext,
};
use gpmc_core::synth::three_class_line;
use gpmc_core::Hyperparams;

#[test]
fn objective_gradient_matches_finite_differences() {
    let data = three_class_line(8, 71);
    let prior = HyperPrior::default();
    let t = vec![0.3, 0.1];
    for method in [Method::Ep, Method::Iep, Method::La] {
        let mut ctx = ObjectiveContext::default();
        let ev = objective(&t, &data, method, &prior, &mut ctx);
        assert!(ev.ok);
        let h = 1e-4;
        for j in 0..t.len() {
            let mut up = t.clone();
            let mut dn = t.clone();
            up[j] += h;
            dn[j] -= h;
            let mut c1 = ObjectiveContext::default();
            let mut c2 = ObjectiveContext::default();
            let f_up = objective(&up, &data, method, &prior, &mut c1).value;
            let f_dn = objective(&dn, &data, method, &prior, &mut c2).value;
            let fd = (f_up - f_dn) / (2.0 * h);
            let rel = (fd - ev.grad[j]).abs() / fd.abs().max(1e-6);
            assert!(
                rel < 2e-3,
                "{method:?} param {j}: analytic {} vs fd {fd}",
                ev.grad[j]
            );
        }
    }
}

#[test]
fn optimizer_contracts_hold() {
    let data = three_class_line(12, 73);
    let init = Hyperparams::isotropic(0.0, median_distance_log(&data.x));
    let res = optimize(&data, &init, Method::Ep, 200).unwrap();
    assert!(res.converged, "optimizer did not reach gradient tolerance");
    // First-order optimality at the returned point.
    let mut ctx = ObjectiveContext::default();
    let ev = objective(&res.theta.to_vec(), &data, Method::Ep, &HyperPrior::default(), &mut ctx);
    assert!(ev.grad.iter().all(|g| g.abs() < 1e-3));
    // Monotone improvement over the initialization.
    assert!(res.value >= res.trace[0].1);
    // Restarting at the optimum terminates immediately.
    let again = optimize(&data, &res.theta, Method::Ep, 200).unwrap();
    assert!(again.trace.len() <= 2, "trace length {}", again.trace.len());
    assert!(again.value >= res.value - 1e-9);
    // Determinism.
    let rerun = optimize(&data, &init, Method::Ep, 200).unwrap();
    assert_eq!(res.theta.to_vec(), rerun.theta.to_vec());
}

#[test]
fn optimum_beats_surrounding_grid() {
    let data = three_class_line(10, 79);
    let res = optimize_multistart(&data, Method::Ep, false, 150).unwrap();
    let best = res.value;
    let prior = HyperPrior::default();
    let center = res.theta.to_vec();
    for di in -2i32..=2 {
        for dj in -2i32..=2 {
            let t = vec![
                center[0] + di as f64 * 0.4,
                center[1] + dj as f64 * 0.4,
            ];
            let mut ctx = ObjectiveContext::default();
            let v = objective(&t, &data, Method::Ep, &prior, &mut ctx).value;
            assert!(
                v <= best + 1e-6,
                "grid point ({di},{dj}) beats optimum: {v} > {best}"
            );
        }
    }
}

#[test]
fn warm_and_cold_evidence_agree() {
    let data = three_class_line(10, 83);
    let theta_a = Hyperparams::isotropic(0.5, 0.2);
    let theta_b = Hyperparams::isotropic(1.2, -0.1);
    let opts = EpOptions::default();
    let fit_a = run_ep(&data, &theta_a, &opts).unwrap();
    let warm_b = run_ep_warm(&data, &theta_b, &opts, Some(&fit_a.warm_start())).unwrap();
    let cold_b = run_ep(&data, &theta_b, &opts).unwrap();
    assert!(
        (warm_b.log_z - cold_b.log_z).abs() < 1e-6,
        "warm {} vs cold {}",
        warm_b.log_z,
        cold_b.log_z
    );
}

#[test]
fn failed_evaluations_are_sentinels() {
    let data = three_class_line(6, 89);
    let prior = HyperPrior::default();
    let mut ctx = ObjectiveContext::default();
    let ev = objective(&[f64::NAN, 0.0], &data, Method::Ep, &prior, &mut ctx);
    assert!(!ev.ok);
    assert_eq!(ev.value, f64::NEG_INFINITY);
    assert!(ev.grad.iter().all(|&g| g == 0.0));
    assert_eq!(ctx.failures, 1);
}
