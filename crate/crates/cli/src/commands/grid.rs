use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

use gpmc_core::ep::{run_ep_warm, EpWarmStart};
use gpmc_core::laplace::{newton_mode, NEWTON_MAX_ITER, NEWTON_TOL};
use gpmc_core::predict::predict_batch;
use gpmc_core::Hyperparams;

use crate::args::CommonOpts;
use crate::methods::MethodKind;
use crate::report::{fmt, fmt_full, mlpd, Report};

use super::{load_test, load_training, per_point_metrics, settings_from};

struct Axis {
    values: Vec<f64>,
}

fn parse_axis(spec: &str) -> Result<Axis> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid axis '{spec}' is not min:max:steps");
    }
    let min: f64 = parts[0].parse().context("bad grid minimum")?;
    let max: f64 = parts[1].parse().context("bad grid maximum")?;
    let steps: usize = parts[2].parse().context("bad grid step count")?;
    if steps == 0 {
        bail!("grid steps must be positive");
    }
    let values = if steps == 1 {
        vec![min]
    } else {
        (0..steps)
            .map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(Axis { values })
}

pub fn run(
    common: &CommonOpts,
    grid_spec: &str,
    methods: &str,
    test: Option<&str>,
    out: Option<&str>,
) -> Result<bool> {
    let kinds = MethodKind::parse_list(methods)?;
    for kind in &kinds {
        if !matches!(kind, MethodKind::Ep | MethodKind::Iep | MethodKind::La) {
            bail!("grid supports ep, iep, and la (got '{}')", kind.name());
        }
    }
    let (l_spec, s_spec) = grid_spec
        .split_once(',')
        .context("grid must be 'lmin:lmax:steps,smin:smax:steps'")?;
    let l_axis = parse_axis(l_spec)?;
    let s_axis = parse_axis(s_spec)?;

    let loaded = load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let settings = settings_from(common, loaded.data.dim())?;
    let test_set = match test {
        Some(path) => {
            let (x_raw, y) = load_test(
                path,
                &common.labels,
                common.delimiter_byte(),
                &loaded.raw.feature_names,
                &loaded.raw.label_names,
            )?;
            let y = y.context("grid --test file needs labels for MLPD")?;
            Some((loaded.standardizer.apply(&x_raw), y))
        }
        None => None,
    };

    let mut partial = false;
    let mut table = String::from("method\tlog_lengthscale\tlog_magnitude\tlog_evidence\tmlpd\taccuracy\n");
    // Best (evidence, mlpd) grid nodes per method, for calibration checks.
    let mut best_lines = Vec::new();

    for kind in &kinds {
        let mut best_ev: Option<(f64, f64, f64)> = None;
        let mut best_ml: Option<(f64, f64, f64)> = None;
        for &ll in &l_axis.values {
            // EP sites warm-start along the magnitude sweep within a row.
            let mut warm: Option<EpWarmStart> = None;
            for &lm in &s_axis.values {
                let theta = Hyperparams::isotropic(lm, ll);
                let node = evaluate_node(
                    *kind,
                    &loaded.data,
                    &theta,
                    &settings,
                    warm.as_mut().map(|w| &*w),
                    test_set.as_ref(),
                );
                match node {
                    Ok((evidence, ml_acc, new_warm)) => {
                        if let Some(w) = new_warm {
                            warm = Some(w);
                        }
                        let (ml_str, acc_str) = match ml_acc {
                            Some((m, a)) => (fmt(m), fmt(a)),
                            None => ("NA".to_string(), "NA".to_string()),
                        };
                        table.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{}\t{}\n",
                            kind.name(),
                            fmt(ll),
                            fmt(lm),
                            fmt_full(evidence),
                            ml_str,
                            acc_str
                        ));
                        if best_ev.map(|(v, _, _)| evidence > v).unwrap_or(true) {
                            best_ev = Some((evidence, ll, lm));
                        }
                        if let Some((m, _)) = ml_acc {
                            if best_ml.map(|(v, _, _)| m > v).unwrap_or(true) {
                                best_ml = Some((m, ll, lm));
                            }
                        }
                    }
                    Err(_) => {
                        partial = true;
                        table.push_str(&format!(
                            "{}\t{}\t{}\tNA\tNA\tNA\n",
                            kind.name(),
                            fmt(ll),
                            fmt(lm)
                        ));
                    }
                }
            }
        }
        if let Some((v, ll, lm)) = best_ev {
            best_lines.push(format!(
                "argmax_evidence\t{}\t{}\t{}\t{}",
                kind.name(),
                fmt(ll),
                fmt(lm),
                fmt_full(v)
            ));
        }
        if let Some((v, ll, lm)) = best_ml {
            best_lines.push(format!(
                "argmax_mlpd\t{}\t{}\t{}\t{}",
                kind.name(),
                fmt(ll),
                fmt(lm),
                fmt(v)
            ));
        }
    }

    if let Some(out_path) = out {
        std::fs::write(out_path, &table)?;
    }
    let mut rep = Report::new("gpmc grid report");
    rep.kv("grid", grid_spec);
    rep.kv(
        "methods",
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
    );
    for line in best_lines {
        rep.raw(line);
    }
    if let Some(out_path) = out {
        rep.kv("table_file", out_path);
    } else {
        rep.blank();
        rep.raw(table.trim_end().to_string());
    }
    rep.write(None)?;
    Ok(partial)
}

type NodeResult = (f64, Option<(f64, f64)>, Option<EpWarmStart>);

fn evaluate_node(
    kind: MethodKind,
    data: &gpmc_core::LabeledDataset,
    theta: &Hyperparams,
    settings: &crate::methods::Settings,
    warm: Option<&EpWarmStart>,
    test: Option<&(DMatrix<f64>, Vec<usize>)>,
) -> Result<NodeResult> {
    match kind {
        MethodKind::Ep | MethodKind::Iep => {
            let fit = run_ep_warm(data, theta, &settings.ep_options(kind), warm)?;
            let ml_acc = match test {
                Some((x, y)) => {
                    let preds = predict_batch(&fit.posterior, &data.x, theta, x)?;
                    let mut probs = DMatrix::zeros(x.nrows(), data.num_classes);
                    for (j, p) in preds.iter().enumerate() {
                        for k in 0..data.num_classes {
                            probs[(j, k)] = p.probs[k];
                        }
                    }
                    let (lpd, correct) = per_point_metrics(&probs, y);
                    Some((
                        mlpd(&lpd),
                        correct.iter().sum::<f64>() / correct.len() as f64,
                    ))
                }
                None => None,
            };
            let warm = fit.warm_start();
            Ok((fit.log_z, ml_acc, Some(warm)))
        }
        MethodKind::La => {
            let st = newton_mode(data, theta, NEWTON_TOL, NEWTON_MAX_ITER)?;
            let ml_acc = match test {
                Some((x, y)) => {
                    let mut probs = DMatrix::zeros(x.nrows(), data.num_classes);
                    for j in 0..x.nrows() {
                        let row: Vec<f64> = x.row(j).iter().copied().collect();
                        let p = gpmc_core::laplace::la_predict(
                            &st,
                            &data.x,
                            theta,
                            &row,
                            gpmc_core::laplace::PREDICT_DRAWS,
                            settings.seed ^ (j as u64).wrapping_mul(0x9e37_79b9),
                        )?;
                        for k in 0..data.num_classes {
                            probs[(j, k)] = p[k];
                        }
                    }
                    let (lpd, correct) = per_point_metrics(&probs, y);
                    Some((
                        mlpd(&lpd),
                        correct.iter().sum::<f64>() / correct.len() as f64,
                    ))
                }
                None => None,
            };
            Ok((st.log_marginal, ml_acc, None))
        }
        _ => unreachable!(),
    }
}
