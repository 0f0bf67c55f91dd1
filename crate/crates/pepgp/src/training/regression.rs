use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions, LbfgsStatus};
use super::{init_params, TraceRecord, TrainConfig, TrainableParams};
use crate::energy::{collapsed_eval, exact_gp_logml_grad, BlockPartition};
use crate::kernel::KernelHyper;
use crate::linalg::LowRankSystem;
use crate::pep::PosteriorState;
use crate::{Error, Exec, Result};

/// Which collapsed objective to fit: power `alpha` (0 selects VFE) over
/// singleton sites, or over `blocks` contiguous blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMethod {
    pub alpha: f64,
    pub blocks: Option<usize>,
}

impl RegressionMethod {
    pub fn vfe() -> Self {
        Self { alpha: 0.0, blocks: None }
    }

    pub fn pep(alpha: f64) -> Self {
        Self { alpha, blocks: None }
    }

    pub fn partition(&self, n: usize) -> Result<BlockPartition> {
        match self.blocks {
            None => BlockPartition::singletons(n, self.alpha),
            Some(b) => BlockPartition::contiguous(n, b, self.alpha),
        }
    }

    /// Short label such as `VFE`, `PEP(0.5)` or `PEP(1,B=4)`.
    pub fn label(&self) -> String {
        let base = if self.alpha == 0.0 { "VFE".to_string() } else { format!("PEP({})", self.alpha) };
        match self.blocks {
            Some(b) => format!("{base}[B={b}]"),
            None => base,
        }
    }
}

/// Negative collapsed energy and its gradient in the flat parameter order.
pub fn regression_objective_grads(
    params: &TrainableParams,
    x: &DMatrix<f64>,
    y: &[f64],
    partition: &BlockPartition,
) -> Result<(f64, DVector<f64>)> {
    objective_with(Exec::default(), params, x, y, partition)
}

fn objective_with(
    exec: Exec,
    params: &TrainableParams,
    x: &DMatrix<f64>,
    y: &[f64],
    partition: &BlockPartition,
) -> Result<(f64, DVector<f64>)> {
    let run = || -> Result<(f64, DVector<f64>)> {
        let sys = LowRankSystem::new_with(exec, x, &params.z, &params.hyper)?;
        let e = collapsed_eval(exec, &sys, y, partition, true)?;
        Ok((-e.energy, -e.grad.expect("gradient requested")))
    };
    run().map_err(|e| Error::AtParams { params: params.to_vec().as_slice().to_vec(), source: Box::new(e) })
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub params: TrainableParams,
    pub posterior: PosteriorState,
    pub energy: f64,
    pub trace: Vec<TraceRecord>,
    pub status: LbfgsStatus,
    pub evals: usize,
}

/// Fit from the default initialisation.
pub fn fit_regression(
    x: &DMatrix<f64>,
    y: &[f64],
    m: usize,
    method: RegressionMethod,
    cfg: &TrainConfig,
) -> Result<RegressionFit> {
    let init = init_params(x, y, m, cfg.seed)?;
    fit_regression_from(init, x, y, method, cfg)
}

fn masked(v: &DVector<f64>, mask: &[bool]) -> DVector<f64> {
    DVector::from_iterator(mask.iter().filter(|m| **m).count(), v.iter().zip(mask).filter(|(_, m)| **m).map(|(x, _)| *x))
}

fn unmasked(base: &DVector<f64>, free: &DVector<f64>, mask: &[bool]) -> DVector<f64> {
    let mut out = base.clone();
    let mut k = 0;
    for (i, m) in mask.iter().enumerate() {
        if *m {
            out[i] = free[k];
            k += 1;
        }
    }
    out
}

/// Maximise the collapsed energy with L-BFGS starting from `init`.
pub fn fit_regression_from(
    init: TrainableParams,
    x: &DMatrix<f64>,
    y: &[f64],
    method: RegressionMethod,
    cfg: &TrainConfig,
) -> Result<RegressionFit> {
    let n = x.nrows();
    if init.num_pseudo() > n {
        return Err(Error::arg("more pseudo-points than data"));
    }
    let partition = method.partition(n)?;
    partition.check(n, init.num_pseudo())?;
    let base = init.to_vec();
    let mask = cfg.mask(init.hyper.dim(), init.num_pseudo());
    let x0 = masked(&base, &mask);
    let opts = LbfgsOptions { memory: cfg.lbfgs_memory, max_evals: cfg.max_evals, ..Default::default() };
    let start = Instant::now();
    let mut trace = Vec::new();
    let objective = |free: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let p = init.with_vec(&unmasked(&base, free, &mask))?;
        let (f, g) = objective_with(cfg.exec, &p, x, y, &partition)?;
        Ok((f, masked(&g, &mask)))
    };
    let result = minimize(objective, &x0, &opts, &mut |i, f, gn, best| {
        trace.push(TraceRecord {
            iteration: i,
            objective: f,
            best,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    });
    let mut params = init.with_vec(&unmasked(&base, &result.x, &mask))?;
    params.iterations = result.iterations;
    let sys = LowRankSystem::new_with(cfg.exec, x, &params.z, &params.hyper)?;
    let eval = collapsed_eval(cfg.exec, &sys, y, &partition, false)?;
    Ok(RegressionFit {
        params,
        posterior: eval.posterior,
        energy: eval.energy,
        trace,
        status: result.status,
        evals: result.evals,
    })
}

#[derive(Debug, Clone)]
pub struct ExactGpFit {
    pub hyper: KernelHyper,
    pub logml: f64,
    pub trace: Vec<TraceRecord>,
    pub status: LbfgsStatus,
}

/// Maximise the exact GP marginal likelihood over the hyper-parameters.
pub fn fit_exact_gp(x: &DMatrix<f64>, y: &[f64], init: &KernelHyper, cfg: &TrainConfig) -> Result<ExactGpFit> {
    let opts = LbfgsOptions { memory: cfg.lbfgs_memory, max_evals: cfg.max_evals, ..Default::default() };
    let start = Instant::now();
    let mut trace = Vec::new();
    let objective = |v: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let h = KernelHyper::from_slice(v.as_slice())?;
        let (f, g) = exact_gp_logml_grad(x, y, &h)?;
        Ok((-f, -g))
    };
    let x0 = DVector::from_vec(init.to_vec());
    let result = minimize(objective, &x0, &opts, &mut |i, f, gn, best| {
        trace.push(TraceRecord {
            iteration: i,
            objective: f,
            best,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    });
    let hyper = KernelHyper::from_slice(result.x.as_slice())?;
    let logml = crate::energy::exact_gp_logml(x, y, &hyper)?;
    Ok(ExactGpFit { hyper, logml, trace, status: result.status })
}
