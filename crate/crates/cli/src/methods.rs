//! Method dispatch: each supported inference backend behind one train /
//! predict interface over standardized data.

use anyhow::{anyhow, bail, Result};
use nalgebra::DMatrix;

use gpmc_core::ep::{run_ep, EpDiagnostics, EpFit, EpMode, EpOptions};
use gpmc_core::gibbs::{gibbs_predict, run_gibbs, GibbsChain, GibbsOptions};
use gpmc_core::hyperopt::{self, optimize_multistart};
use gpmc_core::laplace::{
    la_predict, la_tkp_predict, newton_mode, LaplaceState, TkpOptions, NEWTON_MAX_ITER,
    NEWTON_TOL, PREDICT_DRAWS,
};
use gpmc_core::predict::predict_batch;
use gpmc_core::{Hyperparams, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Ep,
    Iep,
    La,
    LaTkp,
    Gibbs,
    Uniform,
}

impl MethodKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ep" => Self::Ep,
            "iep" => Self::Iep,
            "la" => Self::La,
            "la-tkp" => Self::LaTkp,
            "gibbs" => Self::Gibbs,
            "uniform" => Self::Uniform,
            other => bail!("unknown method '{other}' (expected ep, iep, la, la-tkp, gibbs, or uniform)"),
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(|m| Self::parse(m.trim())).collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ep => "ep",
            Self::Iep => "iep",
            Self::La => "la",
            Self::LaTkp => "la-tkp",
            Self::Gibbs => "gibbs",
            Self::Uniform => "uniform",
        }
    }

    /// Needs fixed hyperparameters (no evidence gradient to optimize).
    pub fn needs_fixed_theta(&self) -> bool {
        matches!(self, Self::Gibbs)
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct Settings {
    pub damping: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub seed: u64,
    pub ard: bool,
    pub fixed_theta: Option<Hyperparams>,
    pub max_evals: usize,
    pub gibbs_samples: usize,
    pub gibbs_burn_in: usize,
    pub gibbs_thin: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            damping: 0.8,
            tol: 1e-6,
            max_outer: 100,
            seed: 0,
            ard: false,
            fixed_theta: None,
            max_evals: 120,
            gibbs_samples: 4000,
            gibbs_burn_in: 2000,
            gibbs_thin: 5,
        }
    }
}

impl Settings {
    pub fn ep_options(&self, kind: MethodKind) -> EpOptions {
        EpOptions {
            mode: if kind == MethodKind::Iep {
                EpMode::Independent
            } else {
                EpMode::Full
            },
            damping: self.damping,
            outer_tol: self.tol,
            max_outer: self.max_outer,
            ..EpOptions::default()
        }
    }

    pub fn gibbs_options(&self) -> GibbsOptions {
        GibbsOptions {
            samples: self.gibbs_samples,
            burn_in: self.gibbs_burn_in,
            thin: self.gibbs_thin,
            seed: self.seed,
            ..GibbsOptions::default()
        }
    }
}

enum Fitted {
    Ep(EpFit),
    La(LaplaceState),
    Gibbs(GibbsChain),
    Uniform,
}

/// A trained model over standardized inputs.
pub struct TrainedModel {
    pub kind: MethodKind,
    pub theta: Option<Hyperparams>,
    pub data: LabeledDataset,
    pub settings: Settings,
    /// Hyperparameter-search trace, when an optimization ran.
    pub opt_trace: Option<OptTrace>,
    state: Fitted,
}

/// Accepted iterates of a hyperparameter search: (log parameters, value).
type OptTrace = Vec<(Vec<f64>, f64)>;

/// Chooses hyperparameters: the fixed ones when given, otherwise type-II MAP
/// under the method's own evidence.
fn select_theta(
    kind: MethodKind,
    data: &LabeledDataset,
    settings: &Settings,
) -> Result<(Hyperparams, Option<OptTrace>)> {
    if let Some(theta) = &settings.fixed_theta {
        return Ok((theta.clone(), None));
    }
    if kind.needs_fixed_theta() {
        bail!(
            "method '{}' runs at fixed hyperparameters; pass --log-sigma2 and --log-lengthscale",
            kind.name()
        );
    }
    let method = match kind {
        MethodKind::Ep => hyperopt::Method::Ep,
        MethodKind::Iep => hyperopt::Method::Iep,
        MethodKind::La | MethodKind::LaTkp => hyperopt::Method::La,
        _ => unreachable!(),
    };
    let res = optimize_multistart(data, method, settings.ard, settings.max_evals)
        .map_err(|e| anyhow!("hyperparameter search failed: {e}"))?;
    Ok((res.theta, Some(res.trace)))
}

pub fn train(kind: MethodKind, data: &LabeledDataset, settings: &Settings) -> Result<TrainedModel> {
    if kind == MethodKind::Uniform {
        return Ok(TrainedModel {
            kind,
            theta: None,
            data: data.clone(),
            settings: settings.clone(),
            opt_trace: None,
            state: Fitted::Uniform,
        });
    }
    let (theta, opt_trace) = select_theta(kind, data, settings)?;
    let state = match kind {
        MethodKind::Ep | MethodKind::Iep => {
            Fitted::Ep(run_ep(data, &theta, &settings.ep_options(kind))?)
        }
        MethodKind::La | MethodKind::LaTkp => {
            Fitted::La(newton_mode(data, &theta, NEWTON_TOL, NEWTON_MAX_ITER)?)
        }
        MethodKind::Gibbs => Fitted::Gibbs(run_gibbs(data, &theta, &settings.gibbs_options())?.0),
        MethodKind::Uniform => unreachable!(),
    };
    Ok(TrainedModel {
        kind,
        theta: Some(theta),
        data: data.clone(),
        settings: settings.clone(),
        opt_trace,
        state,
    })
}

impl TrainedModel {
    pub fn log_evidence(&self) -> Option<f64> {
        match &self.state {
            Fitted::Ep(fit) => Some(fit.log_z),
            Fitted::La(st) => Some(st.log_marginal),
            _ => None,
        }
    }

    pub fn ep_diagnostics(&self) -> Option<&EpDiagnostics> {
        match &self.state {
            Fitted::Ep(fit) => Some(&fit.diagnostics),
            _ => None,
        }
    }

    /// Class probabilities at every standardized test row. The flag is true
    /// when any prediction fell back to a secondary estimator.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
        let c = self.data.num_classes;
        let m = xstar.nrows();
        match &self.state {
            Fitted::Uniform => Ok((DMatrix::from_element(m, c, 1.0 / c as f64), false)),
            Fitted::Ep(fit) => {
                let theta = self.theta.as_ref().unwrap();
                let preds = predict_batch(&fit.posterior, &self.data.x, theta, xstar)?;
                let mut probs = DMatrix::zeros(m, c);
                let mut partial = false;
                for (j, p) in preds.iter().enumerate() {
                    partial |= p.mc_fallback;
                    for k in 0..c {
                        probs[(j, k)] = p.probs[k];
                    }
                }
                Ok((probs, partial))
            }
            Fitted::La(st) => {
                let theta = self.theta.as_ref().unwrap();
                let mut probs = DMatrix::zeros(m, c);
                let mut partial = false;
                for j in 0..m {
                    let row: Vec<f64> = xstar.row(j).iter().copied().collect();
                    if self.kind == MethodKind::LaTkp {
                        let pred = la_tkp_predict(
                            &self.data,
                            theta,
                            st,
                            &row,
                            &TkpOptions {
                                fallback_seed: self.settings.seed ^ j as u64,
                                ..TkpOptions::default()
                            },
                        )?;
                        partial |= pred.fallback;
                        for k in 0..c {
                            probs[(j, k)] = pred.probs[k];
                        }
                    } else {
                        let p = la_predict(
                            st,
                            &self.data.x,
                            theta,
                            &row,
                            PREDICT_DRAWS,
                            self.settings.seed ^ (j as u64).wrapping_mul(0x9e37_79b9),
                        )?;
                        for k in 0..c {
                            probs[(j, k)] = p[k];
                        }
                    }
                }
                Ok((probs, partial))
            }
            Fitted::Gibbs(chain) => {
                let theta = self.theta.as_ref().unwrap();
                let probs = gibbs_predict(chain, &self.data, theta, xstar, 32)?;
                Ok((probs, false))
            }
        }
    }
}
