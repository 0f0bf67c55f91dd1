//! ARD squared-exponential covariance and its derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Exec, Result};

/// Kernel and noise hyper-parameters, stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    log_lengthscales: Vec<f64>,
    log_signal_var: f64,
    log_noise_var: f64,
}

fn check_log(name: &str, v: f64) -> Result<()> {
    let e = v.exp();
    if v.is_finite() && e.is_finite() && e > 0.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} = {v} is not a usable log-parameter")))
    }
}

impl KernelHyper {
    /// Build from natural-scale values.
    pub fn new(lengthscales: &[f64], signal_var: f64, noise_var: f64) -> Result<Self> {
        Self::from_logs(
            lengthscales.iter().map(|l| l.ln()).collect(),
            signal_var.ln(),
            noise_var.ln(),
        )
    }

    pub fn from_logs(log_lengthscales: Vec<f64>, log_signal_var: f64, log_noise_var: f64) -> Result<Self> {
        if log_lengthscales.is_empty() {
            return Err(Error::arg("at least one lengthscale is required"));
        }
        for &l in &log_lengthscales {
            check_log("log lengthscale", l)?;
        }
        check_log("log signal variance", log_signal_var)?;
        check_log("log noise variance", log_noise_var)?;
        Ok(Self { log_lengthscales, log_signal_var, log_noise_var })
    }

    /// Parameters in flat order: log-lengthscales, log-signal, log-noise.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::arg("hyper vector needs at least 3 entries"));
        }
        let d = v.len() - 2;
        Self::from_logs(v[..d].to_vec(), v[d], v[d + 1])
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Number of flat parameters, `D + 2`.
    pub fn num_params(&self) -> usize {
        self.dim() + 2
    }

    pub fn log_lengthscales(&self) -> &[f64] {
        &self.log_lengthscales
    }

    pub fn lengthscale(&self, d: usize) -> f64 {
        self.log_lengthscales[d].exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn log_signal_var(&self) -> f64 {
        self.log_signal_var
    }

    pub fn log_noise_var(&self) -> f64 {
        self.log_noise_var
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        Self::from_logs(self.log_lengthscales.clone(), self.log_signal_var, noise_var.ln())
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

fn check_inputs(x: &DMatrix<f64>, h: &KernelHyper, what: &str) -> Result<()> {
    if x.ncols() != h.dim() {
        return Err(Error::arg(format!(
            "{what} has {} columns but the kernel has {} lengthscales",
            x.ncols(),
            h.dim()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::arg(format!("{what} has a non-finite entry at row {}", i % x.nrows().max(1))));
    }
    Ok(())
}

/// `σ_f² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`.
pub fn se_ard(x: &[f64], x2: &[f64], h: &KernelHyper) -> Result<f64> {
    if x.len() != h.dim() || x2.len() != h.dim() {
        return Err(Error::arg(format!(
            "points of dimension {} and {} for a {}-dimensional kernel",
            x.len(),
            x2.len(),
            h.dim()
        )));
    }
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(h.log_lengthscales())
        .map(|((a, b), l)| {
            let t = (a - b) / l.exp();
            t * t
        })
        .sum();
    Ok(h.signal_var() * (-0.5 * r2).exp())
}

fn sq_dist_scaled(x1: &DMatrix<f64>, i: usize, x2: &DMatrix<f64>, j: usize, inv_l2: &[f64]) -> f64 {
    let mut s = 0.0;
    for (d, w) in inv_l2.iter().enumerate() {
        let t = x1[(i, d)] - x2[(j, d)];
        s += t * t * w;
    }
    s
}

/// Covariance matrix between the rows of `x1` and the rows of `x2`.
pub fn gram(x1: &DMatrix<f64>, x2: &DMatrix<f64>, h: &KernelHyper) -> Result<DMatrix<f64>> {
    gram_with(Exec::default(), x1, x2, h)
}

pub fn gram_with(exec: Exec, x1: &DMatrix<f64>, x2: &DMatrix<f64>, h: &KernelHyper) -> Result<DMatrix<f64>> {
    check_inputs(x1, h, "X1")?;
    check_inputs(x2, h, "X2")?;
    let (n, m) = (x1.nrows(), x2.nrows());
    let inv_l2 = h.inv_sq_lengthscales();
    let sf2 = h.signal_var();
    let rows = exec.map(n, |i| {
        (0..m)
            .map(|j| sf2 * (-0.5 * sq_dist_scaled(x1, i, x2, j, &inv_l2)).exp())
            .collect::<Vec<f64>>()
    });
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Derivative matrices of `gram(x1, x2, h)`.
#[derive(Debug, Clone)]
pub struct GramGrads {
    /// One matrix per flat hyper-parameter (log-lengthscales, log-signal,
    /// log-noise). The log-noise matrix is zero.
    pub hyper: Vec<DMatrix<f64>>,
    /// When requested, one matrix per coordinate of `x1`, indexed `i * D + d`.
    pub inputs: Option<Vec<DMatrix<f64>>>,
}

pub fn gram_grads(x1: &DMatrix<f64>, x2: &DMatrix<f64>, h: &KernelHyper, wrt_x1: bool) -> Result<GramGrads> {
    let k = gram(x1, x2, h)?;
    let (n, m, dim) = (x1.nrows(), x2.nrows(), h.dim());
    let inv_l2 = h.inv_sq_lengthscales();
    let mut hyper = Vec::with_capacity(dim + 2);
    for d in 0..dim {
        hyper.push(DMatrix::from_fn(n, m, |i, j| {
            let t = x1[(i, d)] - x2[(j, d)];
            k[(i, j)] * t * t * inv_l2[d]
        }));
    }
    hyper.push(k.clone());
    hyper.push(DMatrix::zeros(n, m));
    let inputs = wrt_x1.then(|| {
        let mut out = Vec::with_capacity(n * dim);
        for i in 0..n {
            for d in 0..dim {
                let mut g = DMatrix::zeros(n, m);
                for j in 0..m {
                    g[(i, j)] = -k[(i, j)] * (x1[(i, d)] - x2[(j, d)]) * inv_l2[d];
                }
                out.push(g);
            }
        }
        out
    });
    Ok(GramGrads { hyper, inputs })
}

/// Result of contracting an adjoint matrix with the derivatives of a gram.
#[derive(Debug, Clone)]
pub struct GramVjp {
    /// `Σ_ij G_ij ∂K_ij/∂θ` for each flat hyper-parameter (noise entry is 0).
    pub hyper: DVector<f64>,
    /// `Σ_j G_ij ∂K_ij/∂x1_{i,d}` as an `n × D` matrix.
    pub x1: Option<DMatrix<f64>>,
    /// `Σ_i G_ij ∂K_ij/∂x2_{j,d}` as an `m × D` matrix.
    pub x2: Option<DMatrix<f64>>,
}

fn row_vjp(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    inv_l2: &[f64],
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dim = inv_l2.len();
    let mut hyp = vec![0.0; dim + 1];
    let mut xg = vec![0.0; dim];
    for j in 0..x2.nrows() {
        let gk = g[(i, j)] * k[(i, j)];
        if gk == 0.0 {
            continue;
        }
        for d in 0..dim {
            let t = x1[(i, d)] - x2[(j, d)];
            hyp[d] += gk * t * t * inv_l2[d];
            xg[d] -= gk * t * inv_l2[d];
        }
        hyp[dim] += gk;
    }
    (hyp, xg)
}

/// Contract the adjoint `g` (same shape as the gram) with the gram derivatives.
///
/// `k` must be `gram(x1, x2, h)`.
#[allow(clippy::too_many_arguments)]
pub fn gram_vjp(
    exec: Exec,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    h: &KernelHyper,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    want_x1: bool,
    want_x2: bool,
) -> GramVjp {
    let dim = h.dim();
    let inv_l2 = h.inv_sq_lengthscales();
    let rows = exec.map(x1.nrows(), |i| row_vjp(x1, x2, k, g, &inv_l2, i));
    let mut hyper = DVector::zeros(dim + 2);
    let mut gx1 = DMatrix::zeros(x1.nrows(), dim);
    for (i, (hyp, xg)) in rows.iter().enumerate() {
        for d in 0..=dim {
            hyper[d] += hyp[d];
        }
        for d in 0..dim {
            gx1[(i, d)] = xg[d];
        }
    }
    let x2g = want_x2.then(|| {
        let kt = k.transpose();
        let gt = g.transpose();
        let cols = exec.map(x2.nrows(), |j| row_vjp(x2, x1, &kt, &gt, &inv_l2, j).1);
        DMatrix::from_fn(x2.nrows(), dim, |j, d| cols[j][d])
    });
    GramVjp { hyper, x1: want_x1.then_some(gx1), x2: x2g }
}
