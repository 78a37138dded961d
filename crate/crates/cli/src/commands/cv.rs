use anyhow::Result;
use nalgebra::DMatrix;

use gpmc_core::LabeledDataset;

use crate::args::CommonOpts;
use crate::ingest::Standardizer;
use crate::methods::{train, MethodKind};
use crate::report::{
    accuracy, bayesian_bootstrap95, fmt, mlpd, Report, BOOTSTRAP_REPLICATES,
};

use super::{per_point_metrics, settings_from, stratified_folds, theta_line};

struct MethodOutcome {
    kind: MethodKind,
    /// Per test point: (global row, lpd, correct). Points of failed folds
    /// are absent.
    points: Vec<(usize, f64, f64)>,
    failed_folds: Vec<usize>,
    theta_lines: Vec<String>,
}

pub fn run(common: &CommonOpts, methods: &str, folds: usize, out: Option<&str>) -> Result<bool> {
    let kinds = MethodKind::parse_list(methods)?;
    let loaded = super::load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let raw = &loaded.raw;
    let settings = settings_from(common, raw.x.ncols())?;
    let fold_rows = stratified_folds(&raw.y, raw.num_classes(), folds, common.seed)?;

    let mut outcomes: Vec<MethodOutcome> = kinds
        .iter()
        .map(|&kind| MethodOutcome {
            kind,
            points: Vec::new(),
            failed_folds: Vec::new(),
            theta_lines: Vec::new(),
        })
        .collect();

    for (fold_idx, test_rows) in fold_rows.iter().enumerate() {
        let train_rows: Vec<usize> = (0..raw.x.nrows())
            .filter(|i| !test_rows.contains(i))
            .collect();
        // Standardization uses training-fold statistics only.
        let standardizer = Standardizer::fit(&raw.x, &train_rows);
        let x_std = standardizer.apply(&raw.x);
        let train_x = DMatrix::from_fn(train_rows.len(), raw.x.ncols(), |i, j| {
            x_std[(train_rows[i], j)]
        });
        let train_y: Vec<usize> = train_rows.iter().map(|&i| raw.y[i]).collect();
        let test_x = DMatrix::from_fn(test_rows.len(), raw.x.ncols(), |i, j| {
            x_std[(test_rows[i], j)]
        });
        let test_y: Vec<usize> = test_rows.iter().map(|&i| raw.y[i]).collect();
        let train_data = LabeledDataset::new(train_x, train_y, raw.num_classes())?;

        for outcome in outcomes.iter_mut() {
            let start = std::time::Instant::now();
            let fitted = match train(outcome.kind, &train_data, &settings) {
                Ok(f) => f,
                Err(_) => {
                    outcome.failed_folds.push(fold_idx);
                    continue;
                }
            };
            if let Some(theta) = &fitted.theta {
                outcome
                    .theta_lines
                    .push(format!("fold\t{fold_idx}\t{}\ttheta\t{}", outcome.kind.name(), theta_line(theta)));
            }
            match fitted.predict(&test_x) {
                Ok((probs, _)) => {
                    let (lpd, correct) = per_point_metrics(&probs, &test_y);
                    for (j, &row) in test_rows.iter().enumerate() {
                        outcome.points.push((row, lpd[j], correct[j]));
                    }
                }
                Err(_) => outcome.failed_folds.push(fold_idx),
            }
            eprintln!(
                "# cv fold {fold_idx} method {} wall-clock: {:.3}s",
                outcome.kind.name(),
                start.elapsed().as_secs_f64()
            );
        }
    }

    let reference = kinds
        .iter()
        .position(|k| *k == MethodKind::Ep)
        .unwrap_or(0);
    let mut partial = false;
    let mut rep = Report::new("gpmc cv report");
    rep.kv("command", "cv");
    rep.kv("data", &common.data);
    rep.kv("seed", common.seed.to_string());
    rep.kv("folds", folds.to_string());
    rep.kv(
        "methods",
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
    );
    rep.kv("reference", kinds[reference].name());
    rep.kv("bootstrap_replicates", BOOTSTRAP_REPLICATES.to_string());
    rep.blank();
    for outcome in &outcomes {
        for line in &outcome.theta_lines {
            rep.raw(line.clone());
        }
    }
    rep.blank();
    for outcome in &outcomes {
        let name = outcome.kind.name();
        if !outcome.failed_folds.is_empty() {
            partial = true;
            rep.kv(
                "failed_folds",
                format!(
                    "{name}\t{}",
                    outcome
                        .failed_folds
                        .iter()
                        .map(|f| f.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                ),
            );
        }
        if outcome.points.is_empty() {
            rep.kv("method", format!("{name}\tstatus\tno-results"));
            continue;
        }
        let lpds: Vec<f64> = outcome.points.iter().map(|p| p.1).collect();
        let hits: Vec<f64> = outcome.points.iter().map(|p| p.2).collect();
        let (mlo, mhi) = bayesian_bootstrap95(&lpds, BOOTSTRAP_REPLICATES, common.seed ^ 0x6d);
        let (alo, ahi) = bayesian_bootstrap95(&hits, BOOTSTRAP_REPLICATES, common.seed ^ 0x61);
        rep.kv(
            "method",
            format!(
                "{name}\tmlpd\t{}\tci\t{}\t{}\taccuracy\t{}\tci\t{}\t{}",
                fmt(mlpd(&lpds)),
                fmt(mlo),
                fmt(mhi),
                fmt(accuracy(&hits)),
                fmt(alo),
                fmt(ahi)
            ),
        );
    }
    rep.blank();
    // Pairwise log-predictive-density differences against the reference,
    // restricted to points both methods scored.
    for (mi, outcome) in outcomes.iter().enumerate() {
        if mi == reference {
            continue;
        }
        let reference_points = &outcomes[reference].points;
        let mut diffs = Vec::new();
        for &(row, lpd, _) in &outcome.points {
            if let Some(&(_, ref_lpd, _)) = reference_points.iter().find(|p| p.0 == row) {
                diffs.push(lpd - ref_lpd);
            }
        }
        if diffs.is_empty() {
            continue;
        }
        let (lo, hi) = bayesian_bootstrap95(&diffs, BOOTSTRAP_REPLICATES, common.seed ^ 0x70);
        rep.kv(
            "pairwise",
            format!(
                "{}-vs-{}\tmlpd_diff\t{}\tci\t{}\t{}",
                outcome.kind.name(),
                kinds[reference].name(),
                fmt(diffs.iter().sum::<f64>() / diffs.len() as f64),
                fmt(lo),
                fmt(hi)
            ),
        );
    }
    rep.write(out)?;
    Ok(partial)
}
