//! Collapsed objectives for Gaussian regression: the PEP energy for any
//! power and block structure, its VFE limit, the exact-GP baseline and the
//! surrogate-regression view of a pseudo-point posterior.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernel::{gram, gram_vjp, KernelHyper};
use crate::linalg::{chol_psd, low_rank_solve_logdet, JitterChol, LowRankSystem};
use crate::pep::PosteriorState;
use crate::{Error, Exec, Result};

/// Disjoint, exhaustive data blocks with one power each. A power of `0`
/// selects the variational (VFE) limit for that block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    blocks: Vec<Vec<usize>>,
    alphas: Vec<f64>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Vec<usize>>, alphas: Vec<f64>) -> Result<Self> {
        if blocks.len() != alphas.len() {
            return Err(Error::arg("one power per block is required"));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && **a <= 1.0)) {
            return Err(Error::arg(format!("block power {a} outside [0, 1]")));
        }
        if blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::arg("empty block"));
        }
        Ok(Self { blocks, alphas })
    }

    /// One datum per block (FITC-like structure).
    pub fn singletons(n: usize, alpha: f64) -> Result<Self> {
        Self::new((0..n).map(|i| vec![i]).collect(), vec![alpha; n])
    }

    /// `b` contiguous blocks of near-equal size.
    pub fn contiguous(n: usize, b: usize, alpha: f64) -> Result<Self> {
        if b == 0 || b > n.max(1) {
            return Err(Error::arg(format!("cannot split {n} points into {b} blocks")));
        }
        let mut blocks = Vec::with_capacity(b);
        let mut start = 0;
        for k in 0..b {
            let end = start + (n - start) / (b - k);
            blocks.push((start..end).collect());
            start = end;
        }
        Self::new(blocks, vec![alpha; b])
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Validate against `n` data and `m` pseudo-points.
    pub fn check(&self, n: usize, m: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for b in &self.blocks {
            if b.len() > m.max(1) {
                return Err(Error::arg(format!("block of size {} exceeds {m} pseudo-points", b.len())));
            }
            for &i in b {
                if i >= n || seen[i] {
                    return Err(Error::arg(format!("index {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::arg(format!("index {i} is not assigned to a block")));
        }
        Ok(())
    }
}

struct BlockFactor {
    idx: Vec<usize>,
    alpha: f64,
    d: DMatrix<f64>,
    chol: JitterChol,
}

/// Value (and optionally gradient) of the collapsed PEP energy.
#[derive(Debug, Clone)]
pub struct CollapsedEval {
    pub energy: f64,
    pub posterior: PosteriorState,
    /// `∂E/∂θ` in flat order: log-lengthscales, log-signal, log-noise,
    /// then `Z` row-major.
    pub grad: Option<DVector<f64>>,
}

/// Collapsed PEP energy `log Z_PEP` with `K̄ = Q + blkdiag(α_b D_b) + σ² I`
/// and correction `-Σ_b (1-α_b)/(2α_b) log det(I + α_b D_b/σ²)`
/// (`-tr D_b / 2σ²` for `α_b = 0`).
pub fn collapsed_eval(
    exec: Exec,
    sys: &LowRankSystem,
    y: &[f64],
    partition: &BlockPartition,
    want_grad: bool,
) -> Result<CollapsedEval> {
    let n = sys.num_data();
    let m = sys.num_pseudo();
    partition.check(n, m)?;
    if y.len() != n {
        return Err(Error::arg("target length does not match the data"));
    }
    let s2 = sys.hyper().noise_var();
    let v = sys.v();

    let factors: Vec<BlockFactor> = exec.try_map(partition.num_blocks(), |k| {
        let idx = partition.blocks()[k].clone();
        let alpha = partition.alphas()[k];
        let d = crate::pep::blocks_residual(sys, &idx)?;
        let mut b = &d * alpha;
        for i in 0..idx.len() {
            b[(i, i)] += s2;
        }
        let chol = JitterChol::exact(&b)
            .map_err(|_| Error::NonPositiveDiagonal { index: idx[0], value: b[(0, 0)] })?;
        Ok::<_, Error>(BlockFactor { idx, alpha, d, chol })
    })?;

    // VB = V B⁻¹, A' = I + V B⁻¹ Vᵀ.
    let mut vb = DMatrix::zeros(m, n);
    let mut a = DMatrix::identity(m, m);
    let mut logdet_b = 0.0;
    let mut ytbiy = 0.0;
    let mut binv_y = DVector::zeros(n);
    let mut correction = 0.0;
    for f in &factors {
        let v_b = v.select_columns(&f.idx);
        let half = f.chol.solve_lower(&v_b.transpose());
        a += half.transpose() * &half;
        let vbb = f.chol.solve(&v_b.transpose()).transpose();
        let yb = DVector::from_iterator(f.idx.len(), f.idx.iter().map(|&i| y[i]));
        let u = f.chol.solve_vec(&yb);
        ytbiy += yb.dot(&u);
        for (k, &i) in f.idx.iter().enumerate() {
            vb.set_column(i, &vbb.column(k));
            binv_y[i] = u[k];
        }
        let ld = f.chol.logdet();
        logdet_b += ld;
        correction += if f.alpha == 0.0 {
            f.d.trace() / (2.0 * s2)
        } else {
            (1.0 - f.alpha) / (2.0 * f.alpha) * (ld - f.idx.len() as f64 * s2.ln())
        };
    }
    let ca = JitterChol::exact(&a)?;
    let c = v * &binv_y;
    let ainv_c = ca.solve_vec(&c);
    let quad = ytbiy - c.dot(&ainv_c);
    let logdet = logdet_b + ca.logdet();
    let energy = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad - correction;

    let l = sys.chol_uu();
    let gamma = l.solve_upper_vec(&ainv_c);
    let ainv = ca.inverse();
    let inner = DMatrix::identity(m, m) - &ainv;
    let beta = l.solve_upper(&l.solve_upper(&inner).transpose());
    let posterior = PosteriorState { gamma: gamma.clone(), beta: (&beta + beta.transpose()) * 0.5 };
    if !want_grad {
        return Ok(CollapsedEval { energy, posterior, grad: None });
    }

    // ŷ = K̄⁻¹ y, T = A'⁻¹ V B⁻¹, W K̄⁻¹ = L⁻ᵀ T, W ŷ = γ.
    let yhat = &binv_y - vb.transpose() * &ainv_c;
    let t = &ainv * &vb;
    let w = sys.w();
    let wk = l.solve_upper(&t);
    let wy = &gamma;
    // G_uf = -W P + 2 [W_b H_b], G_uu = ½ W P Wᵀ - Σ W_b H_b W_bᵀ.
    let mut g_uf = -&wk + wy * yhat.transpose();
    let mut g_uu = (&wk * w.transpose() - wy * wy.transpose()) * 0.5;
    let mut tr_p = -yhat.norm_squared();
    let mut g_noise = 0.0;
    let mut g_ff: Vec<DMatrix<f64>> = Vec::with_capacity(factors.len());
    for f in &factors {
        let nb = f.idx.len();
        let binv = f.chol.inverse();
        let vbb = vb.select_columns(&f.idx);
        let tb = t.select_columns(&f.idx);
        let kinv_bb = &binv - vbb.transpose() * tb;
        tr_p += kinv_bb.trace();
        let yb = DVector::from_iterator(nb, f.idx.iter().map(|&i| yhat[i]));
        let p_bb = &kinv_bb - &yb * yb.transpose();
        let hb = (&p_bb * f.alpha + &binv * (1.0 - f.alpha)) * 0.5;
        let w_b = w.select_columns(&f.idx);
        let whb = &w_b * &hb;
        for (k, &i) in f.idx.iter().enumerate() {
            let mut col = g_uf.column_mut(i);
            col += whb.column(k) * 2.0;
        }
        g_uu -= &whb * w_b.transpose();
        g_noise += 0.5 * (1.0 - f.alpha) * (&binv * &f.d).trace() / s2;
        g_ff.push(-hb);
    }
    g_noise -= 0.5 * tr_p;

    let h = sys.hyper();
    let dim = h.dim();
    let z = sys.z();
    let x = sys.x();
    let mut grad = DVector::zeros(h.num_params() + m * dim);
    let vjp_uu = gram_vjp(exec, z, z, h, sys.k_uu(), &g_uu, true, true);
    let vjp_uf = gram_vjp(exec, z, x, h, sys.k_uf(), &g_uf, true, false);
    let mut ghyp = vjp_uu.hyper + vjp_uf.hyper;
    let gz = vjp_uu.x1.unwrap() + vjp_uu.x2.unwrap() + vjp_uf.x1.unwrap();
    for (f, gb) in factors.iter().zip(&g_ff) {
        if f.idx.len() == 1 {
            ghyp[dim] += gb[(0, 0)] * h.signal_var();
        } else {
            let xb = x.select_rows(&f.idx);
            let kbb = gram(&xb, &xb, h)?;
            ghyp += gram_vjp(Exec::Sequential, &xb, &xb, h, &kbb, gb, false, false).hyper;
        }
    }
    ghyp[dim + 1] = g_noise * s2;
    grad.rows_mut(0, dim + 2).copy_from(&ghyp);
    for i in 0..m {
        for d in 0..dim {
            grad[dim + 2 + i * dim + d] = gz[(i, d)];
        }
    }
    Ok(CollapsedEval { energy, posterior, grad: Some(grad) })
}

/// Analytic `q(u)` for Gaussian regression under `partition`.
pub fn collapsed_posterior(sys: &LowRankSystem, y: &[f64], partition: &BlockPartition) -> Result<PosteriorState> {
    Ok(collapsed_eval(Exec::default(), sys, y, partition, false)?.posterior)
}

/// Collapsed PEP energy under `partition`.
pub fn pep_regression_energy(sys: &LowRankSystem, y: &[f64], partition: &BlockPartition) -> Result<f64> {
    Ok(collapsed_eval(Exec::default(), sys, y, partition, false)?.energy)
}

/// Collapsed variational free energy
/// `log N(y; 0, Q + σ²I) - tr(K - Q) / 2σ²`.
pub fn vfe_energy(sys: &LowRankSystem, y: &[f64]) -> Result<f64> {
    let n = sys.num_data();
    let s2 = sys.hyper().noise_var();
    let yv = DVector::from_column_slice(y);
    let (sol, logdet) = low_rank_solve_logdet(sys, &DVector::zeros(n), s2, &yv)?;
    let trace: f64 = (sys.diag_kff() - sys.diag_q()).sum();
    Ok(-0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * yv.dot(&sol) - trace / (2.0 * s2))
}

/// Analytic VFE posterior: `A = K_uu + K_uf K_fu / σ²`, `γ = A⁻¹ K_uf y / σ²`.
pub fn vfe_posterior(sys: &LowRankSystem, y: &[f64]) -> Result<PosteriorState> {
    let n = sys.num_data();
    collapsed_posterior(sys, y, &BlockPartition::singletons(n, 0.0)?)
}

/// Exact GP: Cholesky of `K + σ² I` and `(K + σ²I)⁻¹ y`.
struct ExactFactor {
    k: DMatrix<f64>,
    chol: JitterChol,
    alpha: DVector<f64>,
}

fn exact_factor(x: &DMatrix<f64>, y: &[f64], h: &KernelHyper) -> Result<ExactFactor> {
    if y.len() != x.nrows() {
        return Err(Error::arg("target length does not match the data"));
    }
    let k = gram(x, x, h)?;
    let mut ky = k.clone();
    for i in 0..ky.nrows() {
        ky[(i, i)] += h.noise_var();
    }
    let chol = chol_psd(&ky)?;
    let alpha = chol.solve_vec(&DVector::from_column_slice(y));
    Ok(ExactFactor { k, chol, alpha })
}

/// `log N(y; 0, K + σ² I)`.
pub fn exact_gp_logml(x: &DMatrix<f64>, y: &[f64], h: &KernelHyper) -> Result<f64> {
    let f = exact_factor(x, y, h)?;
    let yv = DVector::from_column_slice(y);
    Ok(-0.5 * y.len() as f64 * (2.0 * PI).ln() - 0.5 * f.chol.logdet() - 0.5 * yv.dot(&f.alpha))
}

/// Latent predictive mean and variance of the exact GP.
pub fn exact_gp_predict(
    x: &DMatrix<f64>,
    y: &[f64],
    h: &KernelHyper,
    xstar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = exact_factor(x, y, h)?;
    let ks = gram(xstar, x, h)?;
    let mean = &ks * &f.alpha;
    let half = f.chol.solve_lower(&ks.transpose());
    let sf2 = h.signal_var();
    let var = DVector::from_iterator(xstar.nrows(), half.column_iter().map(|c| (sf2 - c.norm_squared()).max(0.0)));
    Ok((mean, var))
}

/// Exact log marginal likelihood and its gradient in flat hyper order.
pub fn exact_gp_logml_grad(x: &DMatrix<f64>, y: &[f64], h: &KernelHyper) -> Result<(f64, DVector<f64>)> {
    let f = exact_factor(x, y, h)?;
    let yv = DVector::from_column_slice(y);
    let value = -0.5 * y.len() as f64 * (2.0 * PI).ln() - 0.5 * f.chol.logdet() - 0.5 * yv.dot(&f.alpha);
    let g = (&f.alpha * f.alpha.transpose() - f.chol.inverse()) * 0.5;
    let mut grad = gram_vjp(Exec::default(), x, x, h, &f.k, &g, false, false).hyper;
    let d = h.dim();
    grad[d + 1] = g.trace() * h.noise_var();
    Ok((value, grad))
}

/// Exact GP regression with `M` surrogate observations
/// `ỹ = W̃ u + Σ̃^{1/2} ε` whose posterior and evidence equal a given
/// pseudo-point approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub y_tilde: DVector<f64>,
    pub w_tilde: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
}

impl SurrogateModel {
    /// Exact posterior mean, covariance and log evidence of `u` under the
    /// surrogate likelihood and prior `N(0, k_uu)`.
    pub fn exact_posterior(&self, k_uu: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
        let m = self.y_tilde.len();
        let cs = JitterChol::exact(&self.sigma_tilde)?;
        let ck = JitterChol::exact(k_uu)?;
        let prec = ck.inverse() + self.w_tilde.transpose() * cs.solve(&self.w_tilde);
        let cp = JitterChol::exact(&prec)?;
        let cov = cp.inverse();
        let mean = cp.solve_vec(&(self.w_tilde.transpose() * cs.solve_vec(&self.y_tilde)));
        let cy = &self.w_tilde * k_uu * self.w_tilde.transpose() + &self.sigma_tilde;
        let cyc = JitterChol::exact(&cy)?;
        let a = cyc.solve_vec(&self.y_tilde);
        let logml = -0.5 * m as f64 * (2.0 * PI).ln() - 0.5 * cyc.logdet() - 0.5 * self.y_tilde.dot(&a);
        Ok((mean, cov, logml))
    }
}

/// Construct the surrogate regression problem for `q(u)` and energy `F`,
/// with `Σ̃ = s I` chosen so that the evidence equals `F`.
pub fn surrogate_recover(sys: &LowRankSystem, state: &PosteriorState, energy: f64) -> Result<SurrogateModel> {
    let m = sys.num_pseudo();
    let ck = sys.chol_uu();
    let kinv = ck.inverse();
    // Posterior precision V_u⁻¹ = K⁻¹ A K⁻¹ with A⁻¹ = K⁻¹ - β.
    let ainv = &kinv - &state.beta;
    let ca = JitterChol::exact(&((&ainv + ainv.transpose()) * 0.5))
        .map_err(|_| Error::Degenerate("posterior precision is not positive definite".into()))?;
    let a = ca.inverse();
    let post_prec = &kinv * &a * &kinv;
    let r = &post_prec - &kinv;
    let cr = JitterChol::exact(&((&r + r.transpose()) * 0.5))
        .map_err(|_| Error::Degenerate("posterior is not more concentrated than the prior".into()))?;
    let eta = &kinv * &a * &state.gamma;
    let prec_sum = &kinv + &r;
    let cps = JitterChol::exact(&prec_sum)?;
    let rinv_eta = cr.solve_vec(&eta);
    // log p(ỹ) = -M/2 log 2π - ½(log|K⁻¹+R| + log|K| + log|Σ̃|) - ½ηᵀR⁻¹η + ½ηᵀ(K⁻¹+R)⁻¹η.
    let d = -2.0 * energy - m as f64 * (2.0 * PI).ln() - cps.logdet() - ck.logdet() - eta.dot(&rinv_eta)
        + eta.dot(&cps.solve_vec(&eta));
    let s = (d / m as f64).exp();
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Degenerate(format!("surrogate noise scale {s} is not usable")));
    }
    let sq = s.sqrt();
    Ok(SurrogateModel {
        y_tilde: cr.solve_lower_vec(&eta) * sq,
        w_tilde: cr.l().transpose() * sq,
        sigma_tilde: DMatrix::identity(m, m) * s,
    })
}

/// Variational lower bound `E_q[log p(y|f)] - KL(q(u) || p(u))` for any
/// Gaussian `q(u)` given as `(γ, β)`.
pub fn vfe_elbo(sys: &LowRankSystem, y: &[f64], state: &PosteriorState) -> Result<f64> {
    let s2 = sys.hyper().noise_var();
    let kuf = sys.k_uf();
    let mut expected = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let k = kuf.column(i);
        let mu = k.dot(&state.gamma);
        let var = sys.diag_kff()[i] - k.dot(&(&state.beta * k));
        expected += -0.5 * (2.0 * PI * s2).ln() - ((yi - mu).powi(2) + var) / (2.0 * s2);
    }
    let k = sys.k_uu();
    let m = sys.num_pseudo();
    let cov = state.cov_u(k);
    let ccov = JitterChol::exact(&((&cov + cov.transpose()) * 0.5))?;
    let mean = state.mean_u(k);
    let ck = sys.chol_uu();
    let kl = 0.5 * ((ck.solve(&cov)).trace() + mean.dot(&ck.solve_vec(&mean)) - m as f64 + ck.logdet() - ccov.logdet());
    Ok(expected - kl)
}

/// Bound obtained from the unnormalised KL for `q* = Z q`:
/// `Z (1 - log Z + F)`; maximised at `Z = exp F` with value `exp F`.
pub fn unnormalised_kl_bound(z: f64, free_energy: f64) -> f64 {
    z * (1.0 - z.ln() + free_energy)
}
