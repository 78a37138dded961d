//! Dataset ingestion: delimited text with a header row, labels mapped to
//! class indices in first-appearance order, covariates standardized with
//! training statistics only.

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

/// Parsed but not yet standardized data.
#[derive(Debug)]
pub struct RawDataset {
    pub x: DMatrix<f64>,
    /// Zero-based class index per row.
    pub y: Vec<usize>,
    /// Original label strings in first-appearance order; position = class.
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl RawDataset {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }
}

pub fn read_delimited(path: &str, label_column: &str, delimiter: u8) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {path}"))?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .with_context(|| format!("label column '{label_column}' not in header"))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut bad_rows: Vec<usize> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut covs = Vec::with_capacity(feature_names.len());
        let mut ok = record.len() == headers.len();
        let mut label = String::new();
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                label = field.to_string();
                if label.is_empty() {
                    ok = false;
                }
            } else {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => covs.push(v),
                    _ => ok = false,
                }
            }
        }
        if !ok {
            bad_rows.push(line + 2); // 1-based, after the header
            continue;
        }
        let class = match label_names.iter().position(|l| *l == label) {
            Some(c) => c,
            None => {
                label_names.push(label);
                label_names.len() - 1
            }
        };
        y.push(class);
        rows.push(covs);
    }
    if !bad_rows.is_empty() {
        bail!(
            "missing or unparsable values in rows: {}",
            bad_rows
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    if rows.is_empty() {
        bail!("no data rows in {path}");
    }
    if label_names.len() < 2 {
        bail!("dataset contains a single class '{}'", label_names[0]);
    }
    let d = feature_names.len();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(RawDataset {
        x,
        y,
        label_names,
        feature_names,
    })
}

/// Column-wise standardization statistics fitted on a row subset.
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Columns with zero variance on the fitting rows; they standardize to
    /// all-zeros and deserve a warning.
    pub constant_columns: Vec<usize>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let d = x.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        let mut constant_columns = Vec::new();
        for j in 0..d {
            let m: f64 = rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n;
            let v: f64 = rows.iter().map(|&i| (x[(i, j)] - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            let s = v.sqrt();
            if s == 0.0 {
                constant_columns.push(j);
            }
            sd[j] = s;
        }
        Self {
            mean,
            sd,
            constant_columns,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            if self.sd[j] == 0.0 {
                0.0
            } else {
                (x[(i, j)] - self.mean[j]) / self.sd[j]
            }
        })
    }
}
