use anyhow::{Context, Result};

use gpmc_core::gibbs::{run_gibbs, split_half_max_z};

use crate::args::CommonOpts;
use crate::report::{fmt, Report};

use super::{load_test, load_training, per_point_metrics, settings_from};

pub fn run(
    common: &CommonOpts,
    samples: usize,
    burn_in: usize,
    thin: usize,
    test: Option<&str>,
    out: Option<&str>,
) -> Result<bool> {
    let loaded = load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let mut settings = settings_from(common, loaded.data.dim())?;
    settings.gibbs_samples = samples;
    settings.gibbs_burn_in = burn_in;
    settings.gibbs_thin = thin;
    let theta = settings
        .fixed_theta
        .clone()
        .context("gibbs runs at fixed hyperparameters; pass --log-sigma2 and --log-lengthscale")?;

    let start = std::time::Instant::now();
    let (chain, summary) = run_gibbs(&loaded.data, &theta, &settings.gibbs_options())?;
    eprintln!("# gibbs wall-clock: {:.3}s", start.elapsed().as_secs_f64());

    let mut rep = Report::new("gpmc gibbs report");
    rep.kv("seed", common.seed.to_string());
    rep.kv("samples", chain.f_samples.len().to_string());
    rep.kv("burn_in", burn_in.to_string());
    rep.kv("thin", thin.to_string());
    rep.kv(
        "truncated_draw_acceptance",
        fmt(chain.trunc_draws as f64 / chain.trunc_proposals as f64),
    );
    rep.kv("split_half_max_z", fmt(split_half_max_z(&chain)));
    rep.blank();
    rep.raw("site\tlabel\tposterior_mean\tposterior_sd\tp_true_class");
    let c = loaded.data.num_classes;
    for i in 0..loaded.data.len() {
        let label = loaded.data.y[i];
        let mean = summary.site_means[(i, label)];
        let sd = summary.site_covs[i][(label, label)].sqrt();
        rep.raw(format!(
            "{}\t{}\t{}\t{}\t{}",
            i + 1,
            loaded.raw.label_names[label],
            fmt(mean),
            fmt(sd),
            fmt(summary.train_probs[(i, label)])
        ));
    }
    if let Some(test_path) = test {
        let (x_raw, y) = load_test(
            test_path,
            &common.labels,
            common.delimiter_byte(),
            &loaded.raw.feature_names,
            &loaded.raw.label_names,
        )?;
        let x_std = loaded.standardizer.apply(&x_raw);
        let probs = gpmc_core::gibbs::gibbs_predict(&chain, &loaded.data, &theta, &x_std, 32)?;
        rep.blank();
        let mut header = String::from("test_row");
        for name in &loaded.raw.label_names {
            header.push_str(&format!("\tp_{name}"));
        }
        rep.raw(header);
        for j in 0..probs.nrows() {
            let mut line = (j + 1).to_string();
            for k in 0..c {
                line.push_str(&format!("\t{}", fmt(probs[(j, k)])));
            }
            rep.raw(line);
        }
        if let Some(y) = y {
            let (lpd, correct) = per_point_metrics(&probs, &y);
            rep.blank();
            rep.kv(
                "test_mlpd",
                fmt(lpd.iter().sum::<f64>() / lpd.len() as f64),
            );
            rep.kv(
                "test_accuracy",
                fmt(correct.iter().sum::<f64>() / correct.len() as f64),
            );
        }
    }
    rep.write(out)?;
    Ok(false)
}
