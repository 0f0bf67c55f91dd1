use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CavityState, PepConfig, PosteriorState, SiteFactor};
use crate::kernel::{gram_with, KernelHyper};
use crate::likelihood::{norm_cdf, Likelihood, TiltedMoments};
use crate::linalg::{JitterChol, LowRankSystem};
use crate::{Error, Exec, Result};

/// Posterior projections at one input: `μ = k_nᵀγ`, `h = w_n - β k_n`,
/// `p = k_nᵀ h = w_nᵀ V_u w_n`.
pub(crate) struct SiteView {
    pub mu: f64,
    pub p: f64,
    pub h: DVector<f64>,
}

pub(crate) fn site_view(sys: &LowRankSystem, state: &PosteriorState, n: usize) -> SiteView {
    let k = sys.k_uf().column(n);
    let h = sys.w().column(n) - &state.beta * k;
    SiteView { mu: k.dot(&state.gamma), p: k.dot(&h), h }
}

/// Cavity marginal computed without materialising the cavity `β`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CavityMarginal {
    pub mean: f64,
    pub var: f64,
    pub proj_var: f64,
}

pub(crate) fn cavity_marginal(
    sys: &LowRankSystem,
    view: &SiteView,
    site: &SiteFactor,
    alpha: f64,
    n: usize,
) -> Result<CavityMarginal> {
    let sh = -alpha * site.shift();
    let pr = -alpha * site.precision();
    let denom = 1.0 + pr * view.p;
    if !(denom > 0.0) {
        return Err(Error::Cavity { index: Some(n), variance: f64::NEG_INFINITY });
    }
    let proj_var = view.p / denom;
    let var = sys.diag_d()[n] + proj_var;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Cavity { index: Some(n), variance: var });
    }
    Ok(CavityMarginal {
        mean: view.mu + view.p * (sh - pr * view.mu) / denom,
        var,
        proj_var,
    })
}

/// Flat sites and the prior posterior.
pub fn init_state(m: usize, n: usize) -> (PosteriorState, Vec<SiteFactor>) {
    (PosteriorState::prior(m), vec![SiteFactor::FLAT; n])
}

/// Remove an α-fraction of `site` (at datum `n`) from the posterior.
pub fn delete(
    sys: &LowRankSystem,
    state: &PosteriorState,
    n: usize,
    site: &SiteFactor,
    alpha: f64,
) -> Result<CavityState> {
    let view = site_view(sys, state, n);
    let cav = cavity_marginal(sys, &view, site, alpha, n)?;
    let sh = -alpha * site.shift();
    let pr = -alpha * site.precision();
    let denom = 1.0 + pr * view.p;
    let d1 = (sh - pr * view.mu) / denom;
    let c = pr / denom;
    let mut beta = state.beta.clone();
    beta.ger(c, &view.h, &view.h, 1.0);
    Ok(CavityState {
        index: n,
        gamma: &state.gamma + &view.h * d1,
        beta,
        mean: cav.mean,
        var: cav.var,
        proj_var: cav.proj_var,
    })
}

/// Moment-match the tilted distribution: the new posterior at the
/// pseudo-points has the tilted mean and covariance.
pub fn project(sys: &LowRankSystem, cavity: &CavityState, tm: &TiltedMoments) -> Result<PosteriorState> {
    let n = cavity.index;
    let k = sys.k_uf().column(n);
    let h = sys.w().column(n) - &cavity.beta * k;
    if !tm.d1.is_finite() || !tm.d2.is_finite() {
        return Err(Error::Numerical(format!("non-finite tilted moments at site {n}")));
    }
    if !(1.0 + tm.d2 * cavity.proj_var >= 0.0) {
        return Err(Error::Numerical(format!("projected covariance not PSD at site {n}")));
    }
    let mut beta = cavity.beta.clone();
    beta.ger(-tm.d2, &h, &h, 1.0);
    Ok(PosteriorState { gamma: &cavity.gamma + &h * tm.d1, beta })
}

fn proposed_natural(
    mean_cav: f64,
    proj_var: f64,
    tm: &TiltedMoments,
    alpha: f64,
    n: usize,
) -> Result<(f64, f64)> {
    let denom = 1.0 + tm.d2 * proj_var;
    if !(denom > 0.0) {
        return Err(Error::Site { index: n, reason: format!("tilted precision gain is singular ({denom})") });
    }
    let prec = -tm.d2 / denom;
    let shift = (tm.d1 - mean_cav * tm.d2) / denom;
    Ok((shift / alpha, prec / alpha))
}

fn damped_site(old: &SiteFactor, shift: f64, prec: f64, damping: f64, n: usize) -> Result<SiteFactor> {
    let s = (1.0 - damping) * old.shift() + damping * shift;
    let p = (1.0 - damping) * old.precision() + damping * prec;
    SiteFactor::from_natural(s, p)
        .ok_or_else(|| Error::Site { index: n, reason: format!("natural parameters ({s}, {p}) are improper") })
}

/// New site for datum `cavity.index`.
///
/// The proposal is the full site `t_new = (q_tilted / q_cav)^{1/α}`;
/// damping `δ` takes the convex combination of old and proposed natural
/// parameters. `δ = α` reproduces the fractional update
/// `v⁻¹ ← v_new⁻¹ + (1 - α) v⁻¹`.
pub fn update_site(
    old: &SiteFactor,
    cavity: &CavityState,
    tm: &TiltedMoments,
    alpha: f64,
    damping: f64,
) -> Result<SiteFactor> {
    let n = cavity.index;
    let (s, p) = proposed_natural(cavity.mean, cavity.proj_var, tm, alpha, n)?;
    damped_site(old, s, p, damping, n)
}

/// Replace `old` by `new` at datum `n` with a rank-1 update of `state`.
pub fn include_site(
    sys: &LowRankSystem,
    state: &mut PosteriorState,
    n: usize,
    old: &SiteFactor,
    new: &SiteFactor,
) -> Result<()> {
    let view = site_view(sys, state, n);
    include_with_view(state, &view, new.shift() - old.shift(), new.precision() - old.precision(), n)
}

fn include_with_view(state: &mut PosteriorState, view: &SiteView, dshift: f64, dprec: f64, n: usize) -> Result<()> {
    let denom = 1.0 + dprec * view.p;
    if !(denom > 0.0) {
        return Err(Error::Site { index: n, reason: "update would make the posterior improper".into() });
    }
    let d1 = (dshift - dprec * view.mu) / denom;
    state.gamma.axpy(d1, &view.h, 1.0);
    state.beta.ger(dprec / denom, &view.h, &view.h, 1.0);
    Ok(())
}

/// Rebuild `(γ, β)` from all sites in `O(N M²)`.
pub fn posterior_from_sites(sys: &LowRankSystem, sites: &[SiteFactor]) -> Result<PosteriorState> {
    let m = sys.num_pseudo();
    if sites.len() != sys.num_data() {
        return Err(Error::State(format!("{} sites for {} data", sites.len(), sys.num_data())));
    }
    let prec = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.precision()));
    let shift = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.shift()));
    let v = sys.v();
    let mut vl = v.clone();
    for (j, mut col) in vl.column_iter_mut().enumerate() {
        col *= prec[j];
    }
    let a = DMatrix::identity(m, m) + &vl * v.transpose();
    let ca = JitterChol::exact(&a)?;
    let l = sys.chol_uu();
    let gamma = l.solve_upper_vec(&ca.solve_vec(&(v * shift)));
    // β = L⁻ᵀ (I - A'⁻¹) L⁻¹.
    let inner = DMatrix::identity(m, m) - ca.inverse();
    let beta = l.solve_upper(&l.solve_upper(&inner).transpose());
    Ok(PosteriorState { gamma, beta: (&beta + beta.transpose()) * 0.5 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepStats {
    /// Largest absolute change of `g` or `1/v` over updated sites.
    pub max_change: f64,
    pub updated: usize,
    pub rejected: usize,
}

fn site_change(a: &SiteFactor, b: &SiteFactor) -> f64 {
    let dg = (a.g - b.g).abs();
    let dp = (a.precision() - b.precision()).abs();
    if a.is_flat() && b.is_flat() {
        0.0
    } else {
        dg.max(dp)
    }
}

#[allow(clippy::too_many_arguments)]
fn propose(
    sys: &LowRankSystem,
    state: &PosteriorState,
    site: &SiteFactor,
    y: f64,
    lik: &dyn Likelihood,
    alpha: f64,
    damping: f64,
    n: usize,
) -> Result<(SiteFactor, SiteView)> {
    let view = site_view(sys, state, n);
    let cav = cavity_marginal(sys, &view, site, alpha, n)?;
    let tm = lik.tilted(y, cav.mean, cav.var, alpha).map_err(|e| match e {
        Error::Cavity { variance, .. } => Error::Cavity { index: Some(n), variance },
        other => other,
    })?;
    let (s, p) = proposed_natural(cav.mean, cav.proj_var, &tm, alpha, n)?;
    Ok((damped_site(site, s, p, damping, n)?, view))
}

/// One pass of delete → project → update over `indices` (all data when
/// `None`). Failed updates are counted and skipped.
pub fn sweep(
    sys: &LowRankSystem,
    state: &mut PosteriorState,
    sites: &mut [SiteFactor],
    y: &[f64],
    lik: &dyn Likelihood,
    cfg: &PepConfig,
    indices: Option<&[usize]>,
) -> Result<SweepStats> {
    let n = sys.num_data();
    if sites.len() != n || y.len() != n {
        return Err(Error::State(format!("{} sites and {} targets for {n} data", sites.len(), y.len())));
    }
    cfg.validate(n)?;
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let mut stats = SweepStats::default();
    if cfg.parallel_updates {
        let snapshot = &*state;
        let sites_ro = &*sites;
        let proposals = cfg.exec.map(idx.len(), |k| {
            let i = idx[k];
            propose(sys, snapshot, &sites_ro[i], y[i], lik, cfg.alpha_for(i), cfg.damping, i).map(|(s, _)| s)
        });
        let before: Vec<SiteFactor> = sites.to_vec();
        for (k, p) in proposals.into_iter().enumerate() {
            match p {
                Ok(s) => {
                    let i = idx[k];
                    stats.max_change = stats.max_change.max(site_change(&sites[i], &s));
                    sites[i] = s;
                    stats.updated += 1;
                }
                Err(_) => stats.rejected += 1,
            }
        }
        match posterior_from_sites(sys, sites) {
            Ok(s) => *state = s,
            Err(_) => {
                // Joint application failed; fall back to validated rank-1 steps.
                for &i in idx {
                    if before[i] != sites[i] && include_site(sys, state, i, &before[i], &sites[i]).is_err() {
                        sites[i] = before[i];
                        stats.rejected += 1;
                        stats.updated -= 1;
                    }
                }
            }
        }
    } else {
        for &i in idx {
            let alpha = cfg.alpha_for(i);
            match propose(sys, state, &sites[i], y[i], lik, alpha, cfg.damping, i) {
                Ok((new, view)) => {
                    let old = sites[i];
                    let ds = new.shift() - old.shift();
                    let dp = new.precision() - old.precision();
                    if include_with_view(state, &view, ds, dp, i).is_ok() {
                        stats.max_change = stats.max_change.max(site_change(&old, &new));
                        sites[i] = new;
                        stats.updated += 1;
                    } else {
                        stats.rejected += 1;
                    }
                }
                Err(_) => stats.rejected += 1,
            }
        }
        if cfg.refresh_each_sweep && stats.updated > 0 {
            if let Ok(s) = posterior_from_sites(sys, sites) {
                *state = s;
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PepDiagnostics {
    pub sweeps: usize,
    pub converged: bool,
    pub rejected: usize,
    pub max_change: Vec<f64>,
    /// Energy after each sweep.
    pub energy_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PepRun {
    pub state: PosteriorState,
    pub sites: Vec<SiteFactor>,
    pub energy: f64,
    pub diagnostics: PepDiagnostics,
}

/// Sweep until the largest site change is below `cfg.tol` or
/// `cfg.max_sweeps` is reached. Non-convergence is reported in the
/// diagnostics, not as an error.
pub fn run_pep(sys: &LowRankSystem, y: &[f64], lik: &dyn Likelihood, cfg: &PepConfig) -> Result<PepRun> {
    let n = sys.num_data();
    cfg.validate(n)?;
    let (mut state, mut sites) = init_state(sys.num_pseudo(), n);
    let mut diag = PepDiagnostics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if n == 0 {
        diag.converged = true;
        return Ok(PepRun { state, sites, energy: 0.0, diagnostics: diag });
    }
    for _ in 0..cfg.max_sweeps {
        let batch: Option<Vec<usize>> = cfg.minibatch_size.filter(|&b| b < n).map(|b| {
            let mut v = sample(&mut rng, n, b).into_vec();
            v.sort_unstable();
            v
        });
        let stats = sweep(sys, &mut state, &mut sites, y, lik, cfg, batch.as_deref())?;
        diag.sweeps += 1;
        diag.rejected += stats.rejected;
        diag.max_change.push(stats.max_change);
        let terms = super::site_energy_terms(sys, &state, &sites, y, lik, cfg);
        diag.energy_trace.push(super::pep_energy(sys, &sites, &terms, cfg).unwrap_or(f64::NAN));
        if stats.max_change < cfg.tol && stats.rejected == 0 {
            diag.converged = true;
            break;
        }
    }
    let terms = super::site_energy_terms(sys, &state, &sites, y, lik, cfg);
    let energy = super::pep_energy(sys, &sites, &terms, cfg)?;
    Ok(PepRun { state, sites, energy, diagnostics: diag })
}

/// Latent predictive marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Predictive mean `K_*u γ` and variance `k_** - K_*u β K_u*` (clamped at 0).
pub fn predict(sys: &LowRankSystem, state: &PosteriorState, xstar: &DMatrix<f64>) -> Result<Prediction> {
    predict_with(Exec::default(), sys, state, xstar)
}

pub fn predict_with(
    exec: Exec,
    sys: &LowRankSystem,
    state: &PosteriorState,
    xstar: &DMatrix<f64>,
) -> Result<Prediction> {
    predict_at(exec, sys.hyper(), sys.z(), state, xstar)
}

/// [`predict_with`] from the pseudo-inputs and hyper-parameters alone.
pub fn predict_at(
    exec: Exec,
    hyper: &KernelHyper,
    z: &DMatrix<f64>,
    state: &PosteriorState,
    xstar: &DMatrix<f64>,
) -> Result<Prediction> {
    if z.nrows() != state.num_pseudo() || xstar.ncols() != z.ncols() {
        return Err(Error::arg("prediction inputs do not match the posterior"));
    }
    let k_su = gram_with(exec, xstar, z, hyper)?;
    let mean = &k_su * &state.gamma;
    let kb = &k_su * &state.beta;
    let sf2 = hyper.signal_var();
    let var = DVector::from_iterator(
        xstar.nrows(),
        (0..xstar.nrows()).map(|i| (sf2 - kb.row(i).dot(&k_su.row(i))).max(0.0)),
    );
    Ok(Prediction { mean, var })
}

/// Class-one probabilities `Φ(m / √(1 + v))` under the probit likelihood.
pub fn predict_probit(pred: &Prediction) -> DVector<f64> {
    pred.mean.zip_map(&pred.var, |m, v| norm_cdf(m / (1.0 + v).sqrt()))
}
