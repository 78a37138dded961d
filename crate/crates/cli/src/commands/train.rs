use anyhow::Result;

use crate::args::CommonOpts;
use crate::methods::{train, MethodKind};
use crate::model::{save, ModelFile};
use crate::report::{fmt, fmt_full, mlpd, Report};

use super::{load_test, load_training, per_point_metrics, settings_from, theta_line};

pub fn run(
    common: &CommonOpts,
    method: &str,
    test: Option<&str>,
    out: Option<&str>,
    trace: Option<&str>,
) -> Result<bool> {
    let kind = MethodKind::parse(method)?;
    let loaded = load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let settings = settings_from(common, loaded.data.dim())?;
    let start = std::time::Instant::now();
    let model = train(kind, &loaded.data, &settings)?;
    eprintln!("# train wall-clock: {:.3}s", start.elapsed().as_secs_f64());

    let mut partial = false;
    let mut rep = Report::new("gpmc train report");
    rep.kv("method", kind.name());
    rep.kv("n", loaded.data.len().to_string());
    rep.kv("d", loaded.data.dim().to_string());
    rep.kv("classes", loaded.data.num_classes.to_string());
    if let Some(theta) = &model.theta {
        rep.kv("theta", theta_line(theta));
    }
    if let Some(ev) = model.log_evidence() {
        rep.kv("log_evidence", fmt_full(ev));
    }
    if let Some(tr) = &model.opt_trace {
        rep.kv("hyperopt_iterations", tr.len().to_string());
        rep.kv("hyperopt_final", fmt_full(tr.last().unwrap().1));
    }
    if let Some(diag) = model.ep_diagnostics() {
        rep.kv("ep_sweeps", diag.sweeps().to_string());
        rep.kv("ep_converged", diag.converged.to_string());
        rep.kv("ep_inner_sweeps", diag.inner_sweep_count.to_string());
        rep.kv("ep_damping_final", fmt(diag.final_damping));
        if !diag.converged {
            partial = true;
        }
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
        let (probs, flagged) = model.predict(&x_std)?;
        partial |= flagged;
        if let Some(y) = y {
            let (lpd, correct) = per_point_metrics(&probs, &y);
            rep.kv("test_mlpd", fmt(mlpd(&lpd)));
            rep.kv(
                "test_accuracy",
                fmt(correct.iter().sum::<f64>() / correct.len() as f64),
            );
        }
        rep.kv("test_rows", probs.nrows().to_string());
    }
    if let Some(trace_path) = trace {
        let mut body = String::from("sweep\tlog_z_ep\tmax_delta\tskipped\n");
        if let Some(diag) = model.ep_diagnostics() {
            for (i, s) in diag.trace.iter().enumerate() {
                body.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    i + 1,
                    fmt_full(s.log_z_ep),
                    fmt_full(s.max_delta),
                    s.skipped_sites
                ));
            }
        }
        std::fs::write(trace_path, body)?;
        rep.kv("trace_file", trace_path);
    }
    if let Some(out_path) = out {
        let theta = model
            .theta
            .clone()
            .ok_or_else(|| anyhow::anyhow!("method '{}' produces no model file", kind.name()))?;
        save(
            &ModelFile {
                kind,
                theta,
                standardizer: loaded.standardizer,
                label_names: loaded.raw.label_names.clone(),
                feature_names: loaded.raw.feature_names.clone(),
                data: loaded.data.clone(),
                settings: settings.clone(),
            },
            out_path,
        )?;
        rep.kv("model_file", out_path);
    }
    rep.write(None)?;
    Ok(partial)
}
