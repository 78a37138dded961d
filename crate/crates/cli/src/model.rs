//! Plain-text model files.
//!
//! A model is the training recipe, not the fitted state: the standardized
//! training data, the label mapping, the selected hyperparameters, and the
//! method settings. Loading refits deterministically, so saved predictions
//! are byte-reproducible.

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

use gpmc_core::{Hyperparams, LabeledDataset};

use crate::ingest::Standardizer;
use crate::methods::{MethodKind, Settings};
use crate::report::fmt_full;

pub struct ModelFile {
    pub kind: MethodKind,
    pub theta: Hyperparams,
    pub standardizer: Standardizer,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub data: LabeledDataset,
    pub settings: Settings,
}

fn join_full(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(fmt_full)
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn save(model: &ModelFile, path: &str) -> Result<()> {
    let mut out = String::from("gpmc-model\tv1\n");
    let s = &model.settings;
    out.push_str(&format!("method\t{}\n", model.kind.name()));
    out.push_str(&format!("labels\t{}\n", model.label_names.join("\t")));
    out.push_str(&format!("features\t{}\n", model.feature_names.join("\t")));
    out.push_str(&format!(
        "theta\t{}\t{}\n",
        fmt_full(model.theta.log_magnitude),
        join_full(model.theta.log_lengthscales.iter().copied())
    ));
    out.push_str(&format!(
        "standardizer_mean\t{}\n",
        join_full(model.standardizer.mean.iter().copied())
    ));
    out.push_str(&format!(
        "standardizer_sd\t{}\n",
        join_full(model.standardizer.sd.iter().copied())
    ));
    out.push_str(&format!(
        "settings\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        fmt_full(s.damping),
        fmt_full(s.tol),
        s.max_outer,
        s.seed,
        s.gibbs_samples,
        s.gibbs_burn_in,
        s.gibbs_thin
    ));
    out.push_str(&format!(
        "shape\t{}\t{}\t{}\n",
        model.data.len(),
        model.data.dim(),
        model.data.num_classes
    ));
    for i in 0..model.data.len() {
        out.push_str(&format!(
            "row\t{}\t{}\n",
            model.data.y[i],
            join_full(model.data.x.row(i).iter().copied())
        ));
    }
    std::fs::write(path, out).with_context(|| format!("cannot write model to {path}"))
}

pub fn load(path: &str) -> Result<ModelFile> {
    let body = std::fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?;
    let mut lines = body.lines();
    let header = lines.next().unwrap_or_default();
    if header != "gpmc-model\tv1" {
        bail!("{path} is not a gpmc model file");
    }
    let mut kind = None;
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut theta = None;
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    let mut settings = Settings::default();
    let mut shape = None;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();

    let parse_f64s = |fields: &[&str]| -> Result<Vec<f64>> {
        fields
            .iter()
            .map(|f| f.parse::<f64>().context("bad float in model file"))
            .collect()
    };

    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "method" => kind = Some(MethodKind::parse(fields[1])?),
            "labels" => labels = fields[1..].iter().map(|s| s.to_string()).collect(),
            "features" => features = fields[1..].iter().map(|s| s.to_string()).collect(),
            "theta" => {
                let vals = parse_f64s(&fields[1..])?;
                theta = Some(Hyperparams::new(vals[0], vals[1..].to_vec())?);
            }
            "standardizer_mean" => mean = parse_f64s(&fields[1..])?,
            "standardizer_sd" => sd = parse_f64s(&fields[1..])?,
            "settings" => {
                settings.damping = fields[1].parse()?;
                settings.tol = fields[2].parse()?;
                settings.max_outer = fields[3].parse()?;
                settings.seed = fields[4].parse()?;
                settings.gibbs_samples = fields[5].parse()?;
                settings.gibbs_burn_in = fields[6].parse()?;
                settings.gibbs_thin = fields[7].parse()?;
            }
            "shape" => {
                shape = Some((
                    fields[1].parse::<usize>()?,
                    fields[2].parse::<usize>()?,
                    fields[3].parse::<usize>()?,
                ));
            }
            "row" => {
                let y: usize = fields[1].parse()?;
                rows.push((y, parse_f64s(&fields[2..])?));
            }
            _ => bail!("unknown model record '{}'", fields[0]),
        }
    }
    let (n, d, c) = shape.context("model file missing shape")?;
    if rows.len() != n {
        bail!("model file has {} rows, expected {n}", rows.len());
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].1[j]);
    let y = rows.iter().map(|(label, _)| *label).collect();
    let data = LabeledDataset::new(x, y, c)?;
    let theta = theta.context("model file missing theta")?;
    let kind = kind.context("model file missing method")?;
    let constant_columns = sd
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(j, _)| j)
        .collect();
    settings.fixed_theta = Some(theta.clone());
    Ok(ModelFile {
        kind,
        theta,
        standardizer: Standardizer {
            mean,
            sd,
            constant_columns,
        },
        label_names: labels,
        feature_names: features,
        data,
        settings,
    })
}
