//! Learning hyper-parameters and pseudo-inputs.
//!
//! Regression maximises the collapsed PEP energy with L-BFGS. Classification
//! alternates PEP sweeps over a minibatch with an Adam step on the energy,
//! holding the sites fixed while differentiating.

mod adam;
mod classification;
mod gradcheck;
pub mod lbfgs;
mod regression;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::KernelHyper;
use crate::{Error, Exec, Result};

pub use adam::Adam;
pub use classification::{classification_energy_grads, fit_classification, ClassificationFit};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lbfgs::{LbfgsOptions, LbfgsStatus};
pub use regression::{
    fit_exact_gp, fit_regression, fit_regression_from, regression_objective_grads, ExactGpFit, RegressionFit,
    RegressionMethod,
};

/// Kernel hyper-parameters and pseudo-inputs as one flat vector:
/// log-lengthscales, log-signal, log-noise, then `Z` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableParams {
    pub hyper: KernelHyper,
    pub z: DMatrix<f64>,
    pub iterations: usize,
    pub step_size: Option<f64>,
}

impl TrainableParams {
    pub fn new(hyper: KernelHyper, z: DMatrix<f64>) -> Result<Self> {
        if z.ncols() != hyper.dim() || z.nrows() == 0 {
            return Err(Error::arg("pseudo-inputs must be a non-empty M x D matrix"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("pseudo-inputs contain non-finite values"));
        }
        Ok(Self { hyper, z, iterations: 0, step_size: None })
    }

    pub fn num_pseudo(&self) -> usize {
        self.z.nrows()
    }

    pub fn to_vec(&self) -> DVector<f64> {
        let mut v = self.hyper.to_vec();
        for i in 0..self.z.nrows() {
            v.extend(self.z.row(i).iter());
        }
        DVector::from_vec(v)
    }

    /// Inverse of [`TrainableParams::to_vec`] for `m` pseudo-inputs in `d`
    /// dimensions.
    pub fn from_vec(v: &DVector<f64>, d: usize, m: usize) -> Result<Self> {
        if v.len() != d + 2 + m * d {
            return Err(Error::arg(format!("expected {} parameters, got {}", d + 2 + m * d, v.len())));
        }
        let hyper = KernelHyper::from_slice(&v.as_slice()[..d + 2])?;
        let z = DMatrix::from_row_slice(m, d, &v.as_slice()[d + 2..]);
        Self::new(hyper, z)
    }

    /// Same layout with new values, keeping metadata.
    pub fn with_vec(&self, v: &DVector<f64>) -> Result<Self> {
        let mut p = Self::from_vec(v, self.hyper.dim(), self.num_pseudo())?;
        p.iterations = self.iterations;
        p.step_size = self.step_size;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Function evaluations (L-BFGS) or outer steps (Adam).
    pub max_evals: usize,
    pub minibatch: usize,
    pub inner_sweeps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lbfgs_memory: usize,
    pub optimize_hypers: bool,
    pub optimize_inducing: bool,
    /// PEP damping during classification training.
    pub damping: f64,
    pub parallel_updates: bool,
    /// Full sweeps run at the final parameters of classification training.
    pub final_sweeps: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Lbfgs,
            max_evals: 2000,
            minibatch: 200,
            inner_sweeps: 1,
            seed: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lbfgs_memory: 10,
            optimize_hypers: true,
            optimize_inducing: true,
            damping: 0.5,
            parallel_updates: true,
            final_sweeps: 50,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn classification() -> Self {
        Self { optimizer: OptimizerKind::Adam, ..Self::default() }
    }

    fn mask(&self, d: usize, m: usize) -> Vec<bool> {
        let mut v = vec![self.optimize_hypers; d + 2];
        v.extend(std::iter::repeat_n(self.optimize_inducing, m * d));
        v
    }
}

/// One optimiser evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub best: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

fn column_std(x: &DMatrix<f64>, d: usize) -> f64 {
    let c = x.column(d);
    let mean = c.mean();
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len().max(1) as f64;
    var.sqrt()
}

/// Default starting point: lengthscales from the input spread, signal
/// variance `var(y)`, noise `0.1 var(y)`, and a seeded random subset of the
/// inputs as pseudo-inputs.
pub fn init_params(x: &DMatrix<f64>, y: &[f64], m: usize, seed: u64) -> Result<TrainableParams> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::arg(format!("need 1 <= M <= N, got M={m}, N={n}")));
    }
    let ls: Vec<f64> = (0..x.ncols())
        .map(|d| {
            let s = column_std(x, d);
            if s > 0.0 && s.is_finite() { s } else { 1.0 }
        })
        .collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    if !(var > 0.0) || !var.is_finite() {
        var = 1.0;
    }
    let hyper = KernelHyper::new(&ls, var, 0.1 * var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    TrainableParams::new(hyper, x.select_rows(&idx))
}
