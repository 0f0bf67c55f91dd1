use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Standardizer, Task};
use crate::kernel::{gram, KernelHyper};
use crate::likelihood::ProbitLik;
use crate::linalg::chol_psd;
use crate::pep::{predict_at, PosteriorState, ALPHA_MIN};
use crate::training::{fit_classification, fit_exact_gp, fit_regression, init_params, RegressionMethod, TrainConfig};
use crate::{Error, Exec, Result};

/// A column of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    /// Full GP on the training set; no pseudo-points.
    Exact,
    /// Pseudo-point approximation with power `alpha` (0 is VFE) over
    /// singleton sites or `blocks` contiguous blocks.
    Sparse { alpha: f64, blocks: Option<usize> },
}

impl Method {
    pub fn vfe() -> Self {
        Method::Sparse { alpha: 0.0, blocks: None }
    }

    pub fn pep(alpha: f64) -> Self {
        Method::Sparse { alpha, blocks: None }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Method::Exact => None,
            Method::Sparse { alpha, .. } => Some(*alpha),
        }
    }

    pub fn blocks(&self) -> Option<usize> {
        match self {
            Method::Exact => None,
            Method::Sparse { blocks, .. } => *blocks,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Method::Sparse { .. })
    }

    pub fn label(&self) -> String {
        match *self {
            Method::Exact => "GP".into(),
            Method::Sparse { alpha, blocks } => RegressionMethod { alpha, blocks }.label(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Accepts `gp`, `vfe`, or a power in `[0, 1]` such as `0.5`.
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp" | "exact" => Ok(Method::Exact),
            "vfe" => Ok(Method::vfe()),
            t => {
                let a: f64 = t.parse().map_err(|_| Error::arg(format!("unknown method {s:?}")))?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::arg(format!("power {a} outside [0, 1]")));
                }
                Ok(Method::pep(a))
            }
        }
    }
}

/// Classification has no collapsed VFE; `α = 0` runs PEP at this power.
pub const CLASSIFICATION_VFE_ALPHA: f64 = ALPHA_MIN;

/// Fitting options shared by the CLI and the experiment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub train: TrainConfig,
    pub quad_nodes: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { train: TrainConfig::default(), quad_nodes: crate::likelihood::DEFAULT_QUAD_NODES }
    }
}

/// A fitted predictor in the standardised space of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub task: Task,
    pub method: Method,
    pub standardizer: Standardizer,
    pub hyper: KernelHyper,
    /// Pseudo-inputs, or the training inputs for [`Method::Exact`].
    pub z: DMatrix<f64>,
    pub posterior: PosteriorState,
    pub quad_nodes: usize,
}

/// A fitted model with its training diagnostics.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    /// Approximate log marginal likelihood on standardised targets.
    pub energy: f64,
    /// Objective (negative energy) per optimiser evaluation.
    pub trace: Vec<f64>,
    pub status: String,
}

/// Exact GP posterior in `γ, β` form with `Z = X`.
fn exact_posterior(x: &DMatrix<f64>, y: &[f64], h: &KernelHyper) -> Result<PosteriorState> {
    let mut k = gram(x, x, h)?;
    for i in 0..k.nrows() {
        k[(i, i)] += h.noise_var();
    }
    let chol = chol_psd(&k)?;
    Ok(PosteriorState { gamma: chol.solve_vec(&DVector::from_column_slice(y)), beta: chol.inverse() })
}

/// Standardise `data` with its own statistics and fit `method` with `m`
/// pseudo-points (ignored for [`Method::Exact`]).
pub fn fit_model(data: &Dataset, method: Method, m: usize, opts: &FitOptions) -> Result<Fitted> {
    let standardizer = Standardizer::fit(data);
    let train = standardizer.apply(data);
    let (x, y) = (&train.x, train.y.as_slice());
    let cfg = &opts.train;
    let (hyper, z, posterior, energy, trace, status) = match (data.task, method) {
        (Task::Regression, Method::Exact) => {
            let init = init_params(x, y, 1, cfg.seed)?;
            let fit = fit_exact_gp(x, y, &init.hyper, cfg)?;
            let post = exact_posterior(x, y, &fit.hyper)?;
            let trace = fit.trace.iter().map(|t| t.objective).collect();
            (fit.hyper, x.clone(), post, fit.logml, trace, format!("{:?}", fit.status))
        }
        (Task::Regression, Method::Sparse { alpha, blocks }) => {
            let fit = fit_regression(x, y, m, RegressionMethod { alpha, blocks }, cfg)?;
            let trace = fit.trace.iter().map(|t| t.objective).collect();
            (fit.params.hyper, fit.params.z, fit.posterior, fit.energy, trace, format!("{:?}", fit.status))
        }
        (Task::Classification, Method::Sparse { alpha, blocks: None }) => {
            let a = if alpha == 0.0 { CLASSIFICATION_VFE_ALPHA } else { alpha };
            let lik = ProbitLik::new(opts.quad_nodes)?;
            let fit = fit_classification(x, y, m, a, &lik, cfg)?;
            let trace = fit.trace.iter().map(|t| t.objective).collect();
            let status = if fit.converged { "Converged" } else { "MaxSteps" };
            (fit.params.hyper, fit.params.z, fit.state, fit.energy, trace, status.to_string())
        }
        (Task::Classification, _) => {
            return Err(Error::arg(format!("{method} is not available for classification")));
        }
    };
    let model = Model { task: data.task, method, standardizer, hyper, z, posterior, quad_nodes: opts.quad_nodes };
    Ok(Fitted { model, energy, trace, status })
}

/// Predictions in the units of the original targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// Mean and variance of a noisy target.
    Regression { mean: Vec<f64>, var: Vec<f64> },
    /// `p(y = +1)`.
    Classification { prob: Vec<f64> },
}

impl Model {
    pub fn predict(&self, x: &DMatrix<f64>, exec: Exec) -> Result<Predictions> {
        if x.ncols() != self.z.ncols() {
            return Err(Error::arg(format!("model expects {} inputs, got {}", self.z.ncols(), x.ncols())));
        }
        let xs = self.standardizer.x(x);
        let pred = predict_at(exec, &self.hyper, &self.z, &self.posterior, &xs)?;
        Ok(match self.task {
            Task::Regression => {
                let s = &self.standardizer;
                let mean = s.y_inverse(pred.mean.as_slice());
                let var = pred.var.iter().map(|v| (v + self.hyper.noise_var()) * s.y_std * s.y_std).collect();
                Predictions::Regression { mean, var }
            }
            Task::Classification => {
                Predictions::Classification { prob: crate::pep::predict_probit(&pred).as_slice().to_vec() }
            }
        })
    }
}
