use anyhow::{Context, Result};

use crate::args::CommonOpts;
use crate::methods::{train, MethodKind};
use crate::report::{
    accuracy, bayesian_bootstrap95, fmt, mlpd, Report, BOOTSTRAP_REPLICATES,
};

use super::{load_test, load_training, per_point_metrics, settings_from, theta_line};

pub fn run(
    common: &CommonOpts,
    methods: &str,
    test: Option<&str>,
    out: Option<&str>,
) -> Result<bool> {
    let kinds = MethodKind::parse_list(methods)?;
    let test_path = test.context("compare requires --test")?;
    let loaded = load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let settings = settings_from(common, loaded.data.dim())?;
    let (x_raw, y) = load_test(
        test_path,
        &common.labels,
        common.delimiter_byte(),
        &loaded.raw.feature_names,
        &loaded.raw.label_names,
    )?;
    let y = y.context("compare --test file needs labels")?;
    let x_std = loaded.standardizer.apply(&x_raw);

    let mut partial = false;
    let mut rep = Report::new("gpmc compare report");
    rep.kv("data", &common.data);
    rep.kv("test", test_path);
    rep.kv("seed", common.seed.to_string());
    let reference = kinds
        .iter()
        .position(|k| *k == MethodKind::Ep)
        .unwrap_or(0);
    rep.kv("reference", kinds[reference].name());
    rep.blank();

    let mut per_method: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();
    for kind in &kinds {
        let start = std::time::Instant::now();
        let result = train(*kind, &loaded.data, &settings).and_then(|fitted| {
            let theta = fitted.theta.clone();
            let evidence = fitted.log_evidence();
            let (probs, flagged) = fitted.predict(&x_std)?;
            Ok((theta, evidence, probs, flagged))
        });
        eprintln!(
            "# compare method {} wall-clock: {:.3}s",
            kind.name(),
            start.elapsed().as_secs_f64()
        );
        match result {
            Ok((theta, evidence, probs, flagged)) => {
                partial |= flagged;
                if let Some(theta) = &theta {
                    rep.kv("theta", format!("{}\t{}", kind.name(), theta_line(theta)));
                }
                if let Some(ev) = evidence {
                    rep.kv(
                        "log_evidence",
                        format!("{}\t{}", kind.name(), crate::report::fmt_full(ev)),
                    );
                }
                let (lpd, correct) = per_point_metrics(&probs, &y);
                let (mlo, mhi) =
                    bayesian_bootstrap95(&lpd, BOOTSTRAP_REPLICATES, common.seed ^ 0x6d);
                let (alo, ahi) =
                    bayesian_bootstrap95(&correct, BOOTSTRAP_REPLICATES, common.seed ^ 0x61);
                rep.kv(
                    "method",
                    format!(
                        "{}\tmlpd\t{}\tci\t{}\t{}\taccuracy\t{}\tci\t{}\t{}",
                        kind.name(),
                        fmt(mlpd(&lpd)),
                        fmt(mlo),
                        fmt(mhi),
                        fmt(accuracy(&correct)),
                        fmt(alo),
                        fmt(ahi)
                    ),
                );
                per_method.push(Some((lpd, correct)));
            }
            Err(e) => {
                partial = true;
                rep.kv("method", format!("{}\tstatus\tfailed\t{e}", kind.name()));
                per_method.push(None);
            }
        }
    }

    rep.blank();
    if let Some((ref_lpd, _)) = &per_method[reference] {
        for (mi, slot) in per_method.iter().enumerate() {
            if mi == reference {
                continue;
            }
            if let Some((lpd, _)) = slot {
                let diffs: Vec<f64> = lpd
                    .iter()
                    .zip(ref_lpd)
                    .map(|(a, b)| a - b)
                    .collect();
                let (lo, hi) =
                    bayesian_bootstrap95(&diffs, BOOTSTRAP_REPLICATES, common.seed ^ 0x70);
                rep.kv(
                    "pairwise",
                    format!(
                        "{}-vs-{}\tmlpd_diff\t{}\tci\t{}\t{}",
                        kinds[mi].name(),
                        kinds[reference].name(),
                        fmt(diffs.iter().sum::<f64>() / diffs.len() as f64),
                        fmt(lo),
                        fmt(hi)
                    ),
                );
            }
        }
    }
    rep.write(out)?;
    Ok(partial)
}
