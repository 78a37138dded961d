//! Subcommand implementations. Every command returns `Ok(partial)` where
//! `partial` signals flagged-but-usable results (exit code 2).

pub mod compare;
pub mod cv;
pub mod gibbs;
pub mod grid;
pub mod ingest_check;
pub mod predict;
pub mod train;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use gpmc_core::{Hyperparams, LabeledDataset};

use crate::args::CommonOpts;
use crate::ingest::{read_delimited, RawDataset, Standardizer};
use crate::methods::Settings;

pub struct LoadedTraining {
    pub raw: RawDataset,
    pub standardizer: Standardizer,
    /// Standardized dataset over all rows.
    pub data: LabeledDataset,
}

pub fn load_training(path: &str, label_column: &str, delimiter: u8) -> Result<LoadedTraining> {
    let raw = read_delimited(path, label_column, delimiter)?;
    let rows: Vec<usize> = (0..raw.x.nrows()).collect();
    let standardizer = Standardizer::fit(&raw.x, &rows);
    let data = LabeledDataset::new(
        standardizer.apply(&raw.x),
        raw.y.clone(),
        raw.num_classes(),
    )?;
    Ok(LoadedTraining {
        raw,
        standardizer,
        data,
    })
}

/// Reads a test file whose feature columns must match the training header;
/// the label column is optional and must only use training labels.
pub fn load_test(
    path: &str,
    label_column: &str,
    delimiter: u8,
    feature_names: &[String],
    label_names: &[String],
) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {path}"))?;
    let headers = reader.headers()?.clone();
    let label_idx = headers.iter().position(|h| h == label_column);
    let mut feature_idx = Vec::with_capacity(feature_names.len());
    for name in feature_names {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("test file misses feature column '{name}'"))?;
        feature_idx.push(idx);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut covs = Vec::with_capacity(feature_idx.len());
        let mut ok = true;
        for &idx in &feature_idx {
            match record.get(idx).and_then(|f| f.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => covs.push(v),
                _ => ok = false,
            }
        }
        if let Some(li) = label_idx {
            let field = record.get(li).unwrap_or_default();
            match label_names.iter().position(|l| l == field) {
                Some(c) => labels.push(c),
                None => bail!("test row {} has unknown label '{field}'", line + 2),
            }
        }
        if !ok {
            bad.push(line + 2);
            continue;
        }
        rows.push(covs);
    }
    if !bad.is_empty() {
        bail!(
            "missing or unparsable values in test rows: {}",
            bad.iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    if rows.is_empty() {
        bail!("no test rows in {path}");
    }
    let x = DMatrix::from_fn(rows.len(), feature_names.len(), |i, j| rows[i][j]);
    Ok((x, label_idx.map(|_| labels)))
}

pub fn settings_from(common: &CommonOpts, dim: usize) -> Result<Settings> {
    let fixed_theta = match (&common.log_sigma2, &common.log_lengthscale) {
        (Some(lm), Some(ll)) => {
            let lengths: Vec<f64> = ll
                .split(',')
                .map(|v| v.trim().parse::<f64>().context("bad --log-lengthscale"))
                .collect::<Result<_>>()?;
            if lengths.len() != 1 && lengths.len() != dim {
                bail!(
                    "--log-lengthscale needs 1 or {dim} comma-separated values, got {}",
                    lengths.len()
                );
            }
            Some(Hyperparams::new(*lm, lengths)?)
        }
        (None, None) => None,
        _ => bail!("--log-sigma2 and --log-lengthscale must be given together"),
    };
    Ok(Settings {
        damping: common.damping,
        tol: common.tol,
        max_outer: common.max_outer,
        seed: common.seed,
        ard: common.ard,
        fixed_theta,
        max_evals: common.max_evals,
        ..Settings::default()
    })
}

/// Seeded stratified fold assignment: shuffles each class's rows and deals
/// them to folds round-robin. Returns the test rows of each fold.
pub fn stratified_folds(
    y: &[usize],
    num_classes: usize,
    folds: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        bail!("--folds must be at least 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Vec::new(); folds];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if members.len() < folds {
            bail!(
                "class {class} has {} members, fewer than {folds} folds",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for (pos, row) in members.into_iter().enumerate() {
            assignment[pos % folds].push(row);
        }
    }
    for fold in &mut assignment {
        fold.sort_unstable();
    }
    Ok(assignment)
}

/// Per-point log predictive density of the true label and 0/1 correctness.
pub fn per_point_metrics(probs: &DMatrix<f64>, y: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut lpd = Vec::with_capacity(y.len());
    let mut correct = Vec::with_capacity(y.len());
    for (j, &label) in y.iter().enumerate() {
        lpd.push(probs[(j, label)].max(1e-300).ln());
        let mut best = 0;
        for k in 1..probs.ncols() {
            if probs[(j, k)] > probs[(j, best)] {
                best = k;
            }
        }
        correct.push(if best == label { 1.0 } else { 0.0 });
    }
    (lpd, correct)
}

pub fn theta_line(theta: &Hyperparams) -> String {
    let mut parts = vec![crate::report::fmt_full(theta.log_magnitude)];
    parts.extend(theta.log_lengthscales.iter().map(|v| crate::report::fmt_full(*v)));
    parts.join("\t")
}
