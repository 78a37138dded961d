//! Command-line interface definition.

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "gpmc",
    about = "Multiclass Gaussian process classification with EP, Laplace, and Gibbs inference",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonOpts {
    /// Training data file (delimited text with a header row).
    #[arg(long)]
    pub data: String,
    /// Name of the label column.
    #[arg(long)]
    pub labels: String,
    /// Field delimiter.
    #[arg(long, default_value = ",")]
    pub delimiter: char,
    /// Seed for every randomized step; identical seeds give byte-identical
    /// outputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// EP damping factor in (0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub damping: f64,
    /// EP outer-loop convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// EP outer-loop sweep cap.
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    /// Fix log(sigma^2) instead of optimizing the evidence.
    #[arg(long, allow_negative_numbers = true)]
    pub log_sigma2: Option<f64>,
    /// Fix the log lengthscale(s): one value or d comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    pub log_lengthscale: Option<String>,
    /// One lengthscale per input dimension during optimization.
    #[arg(long, default_value_t = false)]
    pub ard: bool,
    /// Objective-evaluation budget for the hyperparameter search.
    #[arg(long, default_value_t = 120)]
    pub max_evals: usize,
}

impl CommonOpts {
    pub fn delimiter_byte(&self) -> u8 {
        self.delimiter as u8
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Validate a data file: label mapping, standardization, warnings.
    IngestCheck {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Fit one method and write a model file.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Inference method: ep, iep, la, la-tkp, gibbs, or uniform.
        #[arg(long)]
        method: String,
        /// Optional held-out file evaluated after training.
        #[arg(long)]
        test: Option<String>,
        /// Model output path.
        #[arg(long)]
        out: Option<String>,
        /// Write the per-sweep convergence trace to this file.
        #[arg(long)]
        trace: Option<String>,
    },
    /// Predict with a saved model.
    Predict {
        /// Model file written by `train --out`.
        #[arg(long)]
        model: String,
        /// Input file; metrics are reported when it has the label column.
        #[arg(long)]
        data: String,
        /// Name of the label column, when present.
        #[arg(long, default_value = "class")]
        labels: String,
        #[arg(long, default_value = ",")]
        delimiter: char,
        /// Predictions table output path.
        #[arg(long)]
        out: Option<String>,
    },
    /// Stratified cross-validation over one or more methods.
    Cv {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated methods, e.g. "ep,iep,la".
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Report output path.
        #[arg(long)]
        out: Option<String>,
    },
    /// Evidence / predictive-performance sweep over a hyperparameter grid.
    Grid {
        #[command(flatten)]
        common: CommonOpts,
        /// Grid as "lmin:lmax:steps,smin:smax:steps" over log lengthscale
        /// and log magnitude.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Comma-separated methods among ep, iep, la.
        #[arg(long, default_value = "ep")]
        method: String,
        /// Held-out file for the MLPD / accuracy columns.
        #[arg(long)]
        test: Option<String>,
        /// Table output path.
        #[arg(long)]
        out: Option<String>,
    },
    /// Train several methods on one file, evaluate them on another, and
    /// report pairwise predictive differences.
    Compare {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated methods; the reference is "ep" when present,
        /// otherwise the first listed.
        #[arg(long)]
        method: String,
        /// Held-out evaluation file (required).
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Run the Gibbs-sampling oracle at fixed hyperparameters.
    Gibbs {
        #[command(flatten)]
        common: CommonOpts,
        /// Retained posterior draws.
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 2000)]
        burn_in: usize,
        #[arg(long, default_value_t = 5)]
        thin: usize,
        /// Optional test file for predictive probabilities.
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
}
