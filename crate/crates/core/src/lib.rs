//! Multiclass Gaussian process classification with a multinomial probit
//! likelihood.
//!
//! The main inference engine is two-level expectation propagation: an outer
//! EP loop over observations whose non-Gaussian tilted moments are
//! themselves approximated by a small inner EP over the probit factors of an
//! augmented latent representation. The coupled variant keeps all
//! between-class posterior dependencies at `O((c+1)n^3)` cost; an independent
//! (per-class) variant runs at `O(c n^3)`. Laplace approximation with the
//! softmax likelihood (including a predictive correction based on ratios of
//! extended marginal likelihoods) and a Gibbs sampler for the augmented
//! probit model are provided as baselines and cross-checks.
//!
//! With the default `parallel` feature the per-observation work inside a
//! sweep, batch prediction, and Monte Carlo summaries run on rayon;
//! disabling the feature yields a fully sequential build with identical
//! results.

pub mod data;
pub mod ep;
pub mod error;
pub mod gibbs;
pub mod hyperopt;
pub mod inner;
pub mod kernel;
pub mod laplace;
pub mod normal;
pub mod par;
pub mod predict;
pub mod synth;

pub(crate) mod structured;

pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use kernel::Hyperparams;
