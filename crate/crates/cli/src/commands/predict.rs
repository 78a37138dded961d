use anyhow::Result;

use crate::methods::train;
use crate::model::load;
use crate::report::{fmt, mlpd, Report};

use super::{load_test, per_point_metrics};

pub fn run(
    model_path: &str,
    data_path: &str,
    label_column: &str,
    delimiter: char,
    out: Option<&str>,
) -> Result<bool> {
    let model_file = load(model_path)?;
    let (x_raw, y) = load_test(
        data_path,
        label_column,
        delimiter as u8,
        &model_file.feature_names,
        &model_file.label_names,
    )?;
    let x_std = model_file.standardizer.apply(&x_raw);

    // Refit deterministically from the stored recipe (fixed hyperparameters).
    let fitted = train(model_file.kind, &model_file.data, &model_file.settings)?;
    let (probs, partial) = fitted.predict(&x_std)?;

    let c = model_file.label_names.len();
    let mut table = String::from("row");
    for name in &model_file.label_names {
        table.push_str(&format!("\tp_{name}"));
    }
    table.push_str("\tprediction");
    if y.is_some() {
        table.push_str("\ttruth\tlog_predictive");
    }
    table.push('\n');
    for j in 0..probs.nrows() {
        table.push_str(&(j + 1).to_string());
        let mut best = 0;
        for k in 0..c {
            table.push_str(&format!("\t{}", fmt(probs[(j, k)])));
            if probs[(j, k)] > probs[(j, best)] {
                best = k;
            }
        }
        table.push_str(&format!("\t{}", model_file.label_names[best]));
        if let Some(y) = &y {
            table.push_str(&format!(
                "\t{}\t{}",
                model_file.label_names[y[j]],
                fmt(probs[(j, y[j])].max(1e-300).ln())
            ));
        }
        table.push('\n');
    }
    if let Some(out_path) = out {
        std::fs::write(out_path, &table)?;
    }

    let mut rep = Report::new("gpmc predict report");
    rep.kv("model", model_path);
    rep.kv("method", model_file.kind.name());
    rep.kv("rows", probs.nrows().to_string());
    if let Some(y) = &y {
        let (lpd, correct) = per_point_metrics(&probs, y);
        rep.kv("mlpd", fmt(mlpd(&lpd)));
        rep.kv(
            "accuracy",
            fmt(correct.iter().sum::<f64>() / correct.len() as f64),
        );
    }
    if let Some(out_path) = out {
        rep.kv("predictions_file", out_path);
    } else {
        rep.blank();
        rep.raw(table.trim_end().to_string());
    }
    rep.write(None)?;
    Ok(partial)
}
