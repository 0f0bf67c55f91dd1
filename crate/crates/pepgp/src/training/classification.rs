use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_params, Adam, TraceRecord, TrainConfig, TrainableParams};
use crate::kernel::gram_vjp;
use crate::likelihood::Likelihood;
use crate::linalg::{JitterChol, LowRankSystem};
use crate::pep::{pep_energy, posterior_from_sites, site_energy_terms, sweep, PepConfig, PosteriorState, SiteFactor};
use crate::{Error, Exec, Result};

/// Exploding-gradient threshold for a stochastic step.
pub const MAX_GRAD_NORM: f64 = 1e6;

struct SiteAdjoint {
    term: f64,
    dp: f64,
    dmu: f64,
    dd: f64,
}

#[allow(clippy::too_many_arguments)]
fn site_adjoint(
    lik: &dyn Likelihood,
    y: f64,
    alpha: f64,
    site: &SiteFactor,
    mu: f64,
    p: f64,
    d: f64,
) -> Option<SiteAdjoint> {
    let sh = -alpha * site.shift();
    let pr = -alpha * site.precision();
    let den = 1.0 + pr * p;
    if !(den > 0.0) {
        return None;
    }
    let q = sh - pr * mu;
    let mc = mu + p * q / den;
    let vc = d + p / den;
    if !(vc > 0.0) {
        return None;
    }
    let tm = lik.tilted(y, mc, vc, alpha).ok()?;
    let quad = 2.0 * mu * sh + sh * sh * p - pr * mu * mu;
    let dg = -0.5 * den.ln() + 0.5 * quad / den;
    let dzdv = tm.dlogz_dv();
    let dg_dp = -0.5 * pr / den + 0.5 * (sh * sh / den - quad * pr / (den * den));
    Some(SiteAdjoint {
        term: (tm.log_z + dg) / alpha,
        dp: (tm.d1 * q / (den * den) + dzdv / (den * den) + dg_dp) / alpha,
        dmu: (tm.d1 + q) / den / alpha,
        dd: dzdv / alpha,
    })
}

/// PEP energy of fixed sites as a function of the kernel hyper-parameters
/// and pseudo-inputs, and its gradient in the flat parameter order.
///
/// With `batch`, the per-site terms are those of the batch scaled by
/// `N / |batch|`. Sites with an invalid cavity at these parameters are
/// skipped; their number is returned last.
pub fn classification_energy_grads(
    exec: Exec,
    sys: &LowRankSystem,
    sites: &[SiteFactor],
    y: &[f64],
    lik: &dyn Likelihood,
    alpha: f64,
    batch: Option<&[usize]>,
) -> Result<(f64, DVector<f64>, usize)> {
    let n = sys.num_data();
    let m = sys.num_pseudo();
    if sites.len() != n || y.len() != n {
        return Err(Error::State("site or target count does not match the data".into()));
    }
    let v = sys.v();
    let kuf = sys.k_uf();
    let w = sys.w();
    let lam = DVector::from_iterator(n, sites.iter().map(|s| s.precision()));
    let eta = DVector::from_iterator(n, sites.iter().map(|s| s.shift()));
    let mut vl = v.clone();
    for (j, mut col) in vl.column_iter_mut().enumerate() {
        col *= lam[j];
    }
    let a = DMatrix::identity(m, m) + &vl * v.transpose();
    let ca = JitterChol::exact(&a)?;
    let l = sys.chol_uu();
    let r = l.solve_upper(&ca.solve(v));
    let gamma = &r * &eta;
    let ve = v * &eta;
    let mut energy = -0.5 * ca.logdet() + 0.5 * ve.dot(&ca.solve_vec(&ve));

    let all: Vec<usize>;
    let idx = match batch {
        Some(b) => b,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let scale = if idx.is_empty() { 0.0 } else { n as f64 / idx.len() as f64 };
    let adj = exec.map(idx.len(), |k| {
        let i = idx[k];
        let mu = kuf.column(i).dot(&gamma);
        let p = kuf.column(i).dot(&r.column(i));
        site_adjoint(lik, y[i], alpha, &sites[i], mu, p, sys.diag_d()[i])
    });
    let mut av = DVector::zeros(n);
    let mut cv = DVector::zeros(n);
    let mut ev = DVector::zeros(n);
    let mut skipped = 0;
    for (k, s) in adj.iter().enumerate() {
        let i = idx[k];
        match s {
            Some(s) => {
                energy += scale * s.term;
                av[i] = scale * s.dp;
                cv[i] = scale * s.dmu;
                ev[i] = scale * s.dd;
            }
            None => skipped += 1,
        }
    }

    let ainv = l.solve_upper(&l.solve_upper(&ca.inverse()).transpose());
    let kinv = sys.chol_uu().inverse();
    let rc = &r * &cv;
    let mut ra = r.clone();
    let mut we = w.clone();
    for j in 0..n {
        ra.column_mut(j).scale_mut(av[j]);
        we.column_mut(j).scale_mut(ev[j]);
    }
    let grc = &gamma * rc.transpose();
    let s_a = &ainv * -0.5 - &gamma * gamma.transpose() * 0.5 - &ra * r.transpose() - (&grc + grc.transpose()) * 0.5;
    let g_b = &gamma + &rc;
    let mut kl = kuf.clone();
    for j in 0..n {
        kl.column_mut(j).scale_mut(lam[j]);
    }
    let g_uf = &ra * 2.0 + &gamma * cv.transpose() - &we * 2.0 + &s_a * &kl * 2.0 + &g_b * eta.transpose();
    let g_uu = &kinv * 0.5 + &we * w.transpose() + &s_a;

    let h = sys.hyper();
    let dim = h.dim();
    let z = sys.z();
    let vjp_uu = gram_vjp(exec, z, z, h, sys.k_uu(), &g_uu, true, true);
    let vjp_uf = gram_vjp(exec, z, sys.x(), h, kuf, &g_uf, true, false);
    let mut ghyp = vjp_uu.hyper + vjp_uf.hyper;
    ghyp[dim] += ev.sum() * h.signal_var();
    let gz = vjp_uu.x1.unwrap() + vjp_uu.x2.unwrap() + vjp_uf.x1.unwrap();
    let mut grad = DVector::zeros(h.num_params() + m * dim);
    grad.rows_mut(0, dim + 2).copy_from(&ghyp);
    for i in 0..m {
        for d in 0..dim {
            grad[dim + 2 + i * dim + d] = gz[(i, d)];
        }
    }
    Ok((energy, grad, skipped))
}

#[derive(Debug, Clone)]
pub struct ClassificationFit {
    pub params: TrainableParams,
    pub state: PosteriorState,
    pub sites: Vec<SiteFactor>,
    pub energy: f64,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    pub rejected_steps: usize,
}

/// Stochastic PEP training for binary labels in `{-1, +1}`.
///
/// Each outer step runs `cfg.inner_sweeps` PEP sweeps over a fresh
/// minibatch, then one Adam step on `-log Z_PEP` with the sites held fixed.
/// `cfg.max_evals` bounds the number of outer steps.
pub fn fit_classification(
    x: &DMatrix<f64>,
    labels: &[f64],
    m: usize,
    alpha: f64,
    lik: &dyn Likelihood,
    cfg: &TrainConfig,
) -> Result<ClassificationFit> {
    if labels.iter().any(|&l| l != 1.0 && l != -1.0) {
        return Err(Error::arg("labels must be -1 or +1"));
    }
    let init = init_params(x, labels, m, cfg.seed)?;
    fit_classification_from(init, x, labels, alpha, lik, cfg)
}

pub(crate) fn fit_classification_from(
    init: TrainableParams,
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    lik: &dyn Likelihood,
    cfg: &TrainConfig,
) -> Result<ClassificationFit> {
    let n = x.nrows();
    let mut pep = PepConfig::classification(alpha);
    pep.damping = cfg.damping;
    pep.parallel_updates = cfg.parallel_updates;
    pep.exec = cfg.exec;
    pep.validate(n)?;
    let alpha = pep.alpha_for(0);

    let mask = cfg.mask(init.hyper.dim(), init.num_pseudo());
    let mut params = init;
    let mut sys = LowRankSystem::new_with(cfg.exec, x, &params.z, &params.hyper)?;
    let mut sites = vec![SiteFactor::FLAT; n];
    let mut state = PosteriorState::prior(params.num_pseudo());
    let mut adam = Adam::new(mask.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.minibatch.clamp(1, n.max(1));
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut rejected_steps = 0;
    let start = Instant::now();

    for it in 0..cfg.max_evals {
        let batch: Option<Vec<usize>> = (batch_size < n).then(|| {
            let mut v = sample(&mut rng, n, batch_size).into_vec();
            v.sort_unstable();
            v
        });
        for _ in 0..cfg.inner_sweeps {
            sweep(&sys, &mut state, &mut sites, y, lik, &pep, batch.as_deref())?;
        }
        let (f, g, _) = classification_energy_grads(cfg.exec, &sys, &sites, y, lik, alpha, batch.as_deref())?;
        let mut g = -g;
        for (gi, free) in g.iter_mut().zip(&mask) {
            if !free {
                *gi = 0.0;
            }
        }
        let gn = g.norm();
        best = best.min(-f);
        trace.push(TraceRecord {
            iteration: it + 1,
            objective: -f,
            best,
            grad_norm: gn,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if !(gn <= MAX_GRAD_NORM) {
            adam.learning_rate *= 0.5;
            rejected_steps += 1;
            continue;
        }
        let mut v = params.to_vec();
        adam.step(&mut v, &g);
        let accepted = params.with_vec(&v).and_then(|p| {
            let s = LowRankSystem::new_with(cfg.exec, x, &p.z, &p.hyper)?;
            let st = posterior_from_sites(&s, &sites)?;
            Ok((p, s, st))
        });
        match accepted {
            Ok((p, s, st)) => {
                params = p;
                sys = s;
                state = st;
            }
            Err(_) => {
                adam.learning_rate *= 0.5;
                rejected_steps += 1;
            }
        }
    }
    params.iterations = cfg.max_evals;
    params.step_size = Some(adam.learning_rate);

    let mut final_cfg = pep.clone();
    final_cfg.parallel_updates = false;
    let mut converged = false;
    for _ in 0..cfg.final_sweeps {
        let s = sweep(&sys, &mut state, &mut sites, y, lik, &final_cfg, None)?;
        if s.max_change < final_cfg.tol && s.rejected == 0 {
            converged = true;
            break;
        }
    }
    let terms = site_energy_terms(&sys, &state, &sites, y, lik, &final_cfg);
    let energy = pep_energy(&sys, &sites, &terms, &final_cfg)?;
    Ok(ClassificationFit { params, state, sites, energy, converged, trace, rejected_steps })
}
