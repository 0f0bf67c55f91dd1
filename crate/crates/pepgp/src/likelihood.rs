//! Tilted-distribution moments for the Gaussian and probit likelihoods.
//!
//! For a cavity marginal `N(f; m, v)` and power `α`, the tilted normaliser is
//! `Z̃ = ∫ N(f; m, v) p(y | f)^α df`; `d1` and `d2` are the first two
//! derivatives of `log Z̃` in `m`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use libm::erfc;
use nalgebra::DMatrix;

use crate::{Error, Result};

/// Default number of Gauss–Hermite nodes.
pub const DEFAULT_QUAD_NODES: usize = 20;

/// Below this argument `log Φ` switches to the Mills-ratio continued fraction.
const TAIL_CUTOFF: f64 = -6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    pub log_z: f64,
    pub d1: f64,
    pub d2: f64,
}

impl TiltedMoments {
    /// `∂ log Z̃ / ∂v = ½ (d2 + d1²)`.
    pub fn dlogz_dv(&self) -> f64 {
        0.5 * (self.d2 + self.d1 * self.d1)
    }

    fn is_finite(&self) -> bool {
        self.log_z.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}

/// A likelihood that can supply tilted moments at a cavity marginal.
pub trait Likelihood: Send + Sync {
    fn tilted(&self, y: f64, m_cav: f64, v_cav: f64, alpha: f64) -> Result<TiltedMoments>;

    /// Noise variance when the likelihood is Gaussian.
    fn gaussian_noise(&self) -> Option<f64> {
        None
    }
}

fn check_cavity(v: f64, allow_zero: bool) -> Result<()> {
    let ok = v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0));
    if ok {
        Ok(())
    } else {
        Err(Error::Cavity { index: None, variance: v })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("power {alpha} outside (0, 1]")))
    }
}

/// Gaussian observation noise `N(y; f, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLik {
    pub sigma2_y: f64,
}

impl GaussianLik {
    pub fn new(sigma2_y: f64) -> Result<Self> {
        if sigma2_y.is_finite() && sigma2_y > 0.0 {
            Ok(Self { sigma2_y })
        } else {
            Err(Error::arg(format!("noise variance {sigma2_y} must be positive")))
        }
    }
}

impl Likelihood for GaussianLik {
    fn tilted(&self, y: f64, m_cav: f64, v_cav: f64, alpha: f64) -> Result<TiltedMoments> {
        gaussian_tilted(m_cav, v_cav, y, alpha, self.sigma2_y)
    }

    fn gaussian_noise(&self) -> Option<f64> {
        Some(self.sigma2_y)
    }
}

/// Closed-form tilted moments of `N(y; f, σ²)^α` against `N(f; m, v)`.
pub fn gaussian_tilted(m_cav: f64, v_cav: f64, y: f64, alpha: f64, sigma2_y: f64) -> Result<TiltedMoments> {
    check_cavity(v_cav, true)?;
    check_alpha(alpha)?;
    if !(sigma2_y > 0.0) {
        return Err(Error::arg("noise variance must be positive"));
    }
    let s = v_cav + sigma2_y / alpha;
    let r = y - m_cav;
    let log_z = -0.5 * alpha * (2.0 * PI * sigma2_y).ln() + 0.5 * sigma2_y.ln()
        - 0.5 * (alpha * v_cav + sigma2_y).ln()
        - 0.5 * r * r / s;
    Ok(TiltedMoments { log_z, d1: r / s, d2: -1.0 / s })
}

pub fn norm_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * PI).ln()
}

pub fn norm_pdf(z: f64) -> f64 {
    norm_log_pdf(z).exp()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Mills ratio `Φ(-x) / φ(x)` for `x > 0`, by Lentz's continued fraction
/// `1 / (x + 1/(x + 2/(x + 3/(x + ...))))`.
fn mills_ratio(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// `log Φ(z)`, accurate in both tails.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z < TAIL_CUTOFF {
        norm_log_pdf(z) + mills_ratio(-z).ln()
    } else if z > 0.0 {
        (-0.5 * erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else {
        norm_cdf(z).ln()
    }
}

/// Inverse Mills ratio `φ(z) / Φ(z)`.
pub fn inv_mills(z: f64) -> f64 {
    if z < TAIL_CUTOFF {
        1.0 / mills_ratio(-z)
    } else {
        (norm_log_pdf(z) - log_norm_cdf(z)).exp()
    }
}

/// Gauss–Hermite rule for `∫ e^{-x²} g(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes seeded from the Jacobi matrix eigenvalues, then Newton-polished on
    /// the orthonormal Hermite recurrence (rescaled to avoid overflow at large `q`).
    pub fn new(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::arg("Gauss-Hermite needs at least 2 nodes"));
        }
        const PIM4: f64 = 0.751_125_544_464_942_5;
        const BIG: f64 = 1e100;
        let nf = q as f64;
        let jacobi = DMatrix::from_fn(q, q, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut seeds: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        seeds.sort_by(|a, b| a.total_cmp(b));
        let mut x = vec![0.0; q];
        let mut w = vec![0.0; q];
        for (i, &seed) in seeds.iter().enumerate() {
            let mut z = seed;
            let mut log_pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                let mut log_scale = 0.0;
                for j in 0..q {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                    if p1.abs() > BIG {
                        p1 /= BIG;
                        p2 /= BIG;
                        log_scale += BIG.ln();
                    }
                }
                let pp = (2.0 * nf).sqrt() * p2;
                log_pp = pp.abs().ln() + log_scale;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            w[i] = 2.0 * (-2.0 * log_pp).exp();
        }
        Ok(Self { nodes: x, weights: w })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Tilted moments of `Φ(y f)^α` by Gauss–Hermite quadrature.
pub fn probit_tilted_quad(m_cav: f64, v_cav: f64, y: f64, alpha: f64, gh: &GaussHermite) -> Result<TiltedMoments> {
    check_cavity(v_cav, false)?;
    check_alpha(alpha)?;
    let scale = (2.0 * v_cav).sqrt();
    let logs: Vec<f64> = gh
        .nodes
        .iter()
        .zip(&gh.weights)
        .map(|(x, w)| w.ln() + alpha * log_norm_cdf(y * (m_cav + scale * x)))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (l, x) in logs.iter().zip(&gh.nodes) {
        let t = (l - top).exp();
        s0 += t;
        s1 += t * x;
        s2 += t * x * x;
    }
    let ex = s1 / s0;
    let var_x = s2 / s0 - ex * ex;
    let tm = TiltedMoments {
        log_z: top + s0.ln() - 0.5 * PI.ln(),
        d1: (2.0 / v_cav).sqrt() * ex,
        d2: (2.0 * var_x - 1.0) / v_cav,
    };
    if tm.is_finite() {
        Ok(tm)
    } else {
        Err(Error::Numerical(format!("probit quadrature failed at m={m_cav}, v={v_cav}")))
    }
}

/// Exact tilted moments of `Φ(y f)` (power one).
pub fn probit_tilted_analytic(m_cav: f64, v_cav: f64, y: f64) -> Result<TiltedMoments> {
    check_cavity(v_cav, true)?;
    let s = (1.0 + v_cav).sqrt();
    let z = y * m_cav / s;
    let d1 = y * inv_mills(z) / s;
    Ok(TiltedMoments { log_z: log_norm_cdf(z), d1, d2: -d1 * (y * z / s + d1) })
}

/// Probit likelihood `Φ(y f)` with labels in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct ProbitLik {
    gh: Arc<GaussHermite>,
    /// Use the closed form when `α = 1`.
    pub analytic_at_one: bool,
}

impl ProbitLik {
    pub fn new(quad_nodes: usize) -> Result<Self> {
        Ok(Self { gh: Arc::new(GaussHermite::new(quad_nodes)?), analytic_at_one: true })
    }

    pub fn quadrature(&self) -> &GaussHermite {
        &self.gh
    }
}

impl Default for ProbitLik {
    fn default() -> Self {
        Self::new(DEFAULT_QUAD_NODES).expect("default node count is valid")
    }
}

impl Likelihood for ProbitLik {
    fn tilted(&self, y: f64, m_cav: f64, v_cav: f64, alpha: f64) -> Result<TiltedMoments> {
        if self.analytic_at_one && alpha == 1.0 {
            probit_tilted_analytic(m_cav, v_cav, y)
        } else {
            probit_tilted_quad(m_cav, v_cav, y, alpha, &self.gh)
        }
    }
}
