//! Random instances and dense reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use pepgp::kernel::{gram, KernelHyper};
use pepgp::linalg::LowRankSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub z: DMatrix<f64>,
    pub h: KernelHyper,
}

impl Instance {
    pub fn system(&self) -> LowRankSystem {
        LowRankSystem::new(&self.x, &self.z, &self.h).unwrap()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

/// Regression instance with `n` points in `d` dimensions and `m` pseudo-inputs
/// drawn uniformly over the same box.
pub fn regression_instance(seed: u64, n: usize, m: usize, d: usize) -> Instance {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, n, d, -3.0, 3.0);
    let z = uniform_matrix(&mut r, m, d, -3.0, 3.0);
    let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.7..2.0)).collect();
    let h = KernelHyper::new(&ls, r.random_range(0.5..2.0), r.random_range(0.05..0.5)).unwrap();
    let y = (0..n)
        .map(|i| {
            let s: f64 = (0..d).map(|k| (x[(i, k)] * (1.0 + k as f64 * 0.3)).sin()).sum();
            s + 0.2 * r.random_range(-1.0..1.0)
        })
        .collect();
    Instance { x, y, z, h }
}

/// Sizes within the ranges used by the cross-path checks.
pub fn random_sizes(seed: u64, n_max: usize, m_max: usize) -> (usize, usize) {
    let mut r = rng(seed ^ 0x5eed);
    (r.random_range(20..=n_max), r.random_range(3..=m_max))
}

/// Same as the regression instance but with `Z = X`.
pub fn full_instance(seed: u64, n: usize, d: usize) -> Instance {
    let mut inst = regression_instance(seed, n, 1, d);
    inst.z = inst.x.clone();
    inst
}

/// Binary labels in `{-1, +1}` from a smooth decision function.
pub fn classification_instance(seed: u64, n: usize, m: usize) -> Instance {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, n, 2, -2.0, 2.0);
    let z = uniform_matrix(&mut r, m, 2, -2.0, 2.0);
    let h = KernelHyper::new(&[1.0, 1.3], 2.0, 0.1).unwrap();
    let y = (0..n)
        .map(|i| {
            let f = x[(i, 0)].sin() + 0.5 * x[(i, 1)] + 0.3 * r.random_range(-1.0..1.0);
            if f > 0.0 { 1.0 } else { -1.0 }
        })
        .collect();
    Instance { x, y, z, h }
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Max-norm error of `a` against `b`, relative to the max-norm of `b`
/// (absolute below unit scale).
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn log_gauss(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let c = cov.clone().cholesky().expect("dense covariance is positive definite");
    let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * y.len() as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * y.dot(&c.solve(y))
}

/// Dense pseudo-point regression: `q(u)` mean and covariance and the energy
/// for residual structure `blocks` with powers `alpha` (0 means VFE).
pub struct DenseSparse {
    pub mean_u: DVector<f64>,
    pub cov_u: DMatrix<f64>,
    pub energy: f64,
}

pub fn dense_sparse(sys: &LowRankSystem, y: &[f64], blocks: &[Vec<usize>], alpha: f64) -> DenseSparse {
    let n = sys.num_data();
    let kuu = sys.k_uu().clone();
    let kuf = sys.k_uf().clone();
    let kinv = kuu.clone().try_inverse().unwrap();
    let q = kuf.transpose() * &kinv * &kuf;
    let kff = gram(sys.x(), sys.x(), sys.hyper()).unwrap();
    let d = &kff - &q;
    let s2 = sys.hyper().noise_var();
    let mut lambda = DMatrix::identity(n, n) * s2;
    let mut correction = 0.0;
    for b in blocks {
        let db = DMatrix::from_fn(b.len(), b.len(), |i, j| d[(b[i], b[j])]);
        if alpha == 0.0 {
            correction -= db.trace() / (2.0 * s2);
        } else {
            for (i, &bi) in b.iter().enumerate() {
                for (j, &bj) in b.iter().enumerate() {
                    lambda[(bi, bj)] += alpha * db[(i, j)];
                }
            }
            let m = DMatrix::identity(b.len(), b.len()) + &db * (alpha / s2);
            let det = m.determinant();
            correction -= (1.0 - alpha) / (2.0 * alpha) * det.ln();
        }
    }
    let yv = DVector::from_column_slice(y);
    let energy = log_gauss(&yv, &(&q + &lambda)) + correction;
    let linv = lambda.try_inverse().unwrap();
    let prec = &kinv + &kinv * &kuf * &linv * kuf.transpose() * &kinv;
    let cov_u = prec.try_inverse().unwrap();
    let mean_u = &cov_u * &kinv * &kuf * &linv * &yv;
    DenseSparse { mean_u, cov_u, energy }
}

/// Dense exact GP log marginal likelihood and latent predictions.
pub fn dense_exact(x: &DMatrix<f64>, y: &[f64], h: &KernelHyper, xs: &DMatrix<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let n = x.nrows();
    let k = gram(x, x, h).unwrap() + DMatrix::identity(n, n) * h.noise_var();
    let yv = DVector::from_column_slice(y);
    let logml = log_gauss(&yv, &k);
    let kinv = k.try_inverse().unwrap();
    let ks = gram(xs, x, h).unwrap();
    let mean = &ks * &kinv * &yv;
    let var = DVector::from_iterator(
        xs.nrows(),
        (0..xs.nrows()).map(|i| h.signal_var() - (ks.row(i) * &kinv * ks.row(i).transpose())[(0, 0)]),
    );
    (logml, mean, var)
}

fn std_norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / 2f64.sqrt())
}

/// Textbook EP for GP classification with a probit likelihood on the full
/// covariance (sequential sweeps, no damping). Returns the latent posterior
/// mean, covariance and EP log marginal likelihood.
pub fn dense_ep_gpc(k: &DMatrix<f64>, y: &[f64], sweeps: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = y.len();
    let mut tau = DVector::<f64>::zeros(n);
    let mut nu = DVector::<f64>::zeros(n);
    let mut sigma = k.clone();
    let mut mu = DVector::<f64>::zeros(n);
    for _ in 0..sweeps {
        for i in 0..n {
            let t_cav = 1.0 / sigma[(i, i)] - tau[i];
            let n_cav = mu[i] / sigma[(i, i)] - nu[i];
            let v_cav = 1.0 / t_cav;
            let m_cav = n_cav / t_cav;
            let z = y[i] * m_cav / (1.0 + v_cav).sqrt();
            let ratio = (-0.5 * z * z - 0.5 * (2.0 * PI).ln()).exp() / std_norm_cdf(z);
            let mu_hat = m_cav + y[i] * v_cav * ratio / (1.0 + v_cav).sqrt();
            let s2_hat = v_cav - v_cav * v_cav * ratio / (1.0 + v_cav) * (z + ratio);
            let dtau = 1.0 / s2_hat - t_cav - tau[i];
            tau[i] += dtau;
            nu[i] = mu_hat / s2_hat - n_cav;
            let si = sigma.column(i).clone_owned();
            let c = dtau / (1.0 + dtau * si[i]);
            sigma -= &si * si.transpose() * c;
            mu = &sigma * &nu;
        }
        // Recompute from scratch to avoid drift.
        let st = DMatrix::from_diagonal(&tau.map(f64::sqrt));
        let b = DMatrix::identity(n, n) + &st * k * &st;
        let binv = b.try_inverse().unwrap();
        sigma = k - k * &st * &binv * &st * k;
        mu = &sigma * &nu;
    }
    // log Z_EP = log N(μ̃; 0, K + Σ̃) + Σ_i [log Z_i + ½ log 2π + ½ log(v_cav + σ̃²)
    //           + (m_cav - μ̃)² / 2(v_cav + σ̃²)].
    let site_var = tau.map(|t| 1.0 / t);
    let mu_t = nu.component_div(&tau);
    let mut log_z = log_gauss(&mu_t, &(k + DMatrix::from_diagonal(&site_var)));
    for i in 0..n {
        let t_cav = 1.0 / sigma[(i, i)] - tau[i];
        let v_cav = 1.0 / t_cav;
        let m_cav = (mu[i] / sigma[(i, i)] - nu[i]) / t_cav;
        let z = y[i] * m_cav / (1.0 + v_cav).sqrt();
        let s = v_cav + site_var[i];
        log_z += std_norm_cdf(z).ln() + 0.5 * (2.0 * PI * s).ln() + 0.5 * (m_cav - mu_t[i]).powi(2) / s;
    }
    (mu, sigma, log_z)
}
