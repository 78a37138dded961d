//! Labeled classification data.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A classification dataset: `n` input vectors of dimension `d` with class
/// labels in `0..num_classes`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `n x d` covariate matrix.
    pub x: DMatrix<f64>,
    /// Zero-based class label per row.
    pub y: Vec<usize>,
    /// Number of classes `c`. Binary problems are accepted; three or more
    /// classes is the intended regime.
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(x: DMatrix<f64>, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::InvalidInput(format!(
                "covariate rows ({}) != labels ({})",
                x.nrows(),
                y.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range 0..{num_classes}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates".into()));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Dataset restricted to the given row indices (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.x[(rows[i], j)]);
        let y = rows.iter().map(|&r| self.y[r]).collect();
        Self {
            x,
            y,
            num_classes: self.num_classes,
        }
    }

    /// Appends one labeled row, as used by predictive corrections that score
    /// a candidate label for a test input.
    pub fn extended(&self, xstar: &[f64], label: usize) -> Result<Self> {
        if xstar.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "test input has dimension {}, expected {}",
                xstar.len(),
                self.dim()
            )));
        }
        let n = self.len();
        let x = DMatrix::from_fn(n + 1, self.dim(), |i, j| {
            if i < n {
                self.x[(i, j)]
            } else {
                xstar[j]
            }
        });
        let mut y = self.y.clone();
        y.push(label);
        Self::new(x, y, self.num_classes)
    }
}
