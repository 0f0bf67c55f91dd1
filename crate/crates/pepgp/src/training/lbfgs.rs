//! Limited-memory BFGS with a strong-Wolfe line search and an evaluation
//! budget.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_evals: usize,
    /// Stop when `‖g‖∞` falls below this.
    pub gtol: f64,
    /// Stop when the relative decrease of one iteration falls below this.
    pub ftol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_evals: 2000, gtol: 1e-6, ftol: 1e-12, c1: 1e-4, c2: 0.9, max_line_search: 25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LbfgsStatus {
    Converged,
    MaxEvals,
    LineSearchFailed,
    NoEvaluations,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    /// Best point seen.
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    pub evals: usize,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

struct Evaluator<'a, F> {
    f: F,
    evals: usize,
    max_evals: usize,
    best: Option<(DVector<f64>, f64, DVector<f64>)>,
    on_eval: &'a mut dyn FnMut(usize, f64, f64, f64),
}

impl<F> Evaluator<'_, F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn exhausted(&self) -> bool {
        self.evals >= self.max_evals
    }

    /// Failed or non-finite evaluations come back as `+∞`.
    fn eval(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.evals += 1;
        let (f, g) = match (self.f)(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
            _ => (f64::INFINITY, DVector::zeros(x.len())),
        };
        if f.is_finite() && self.best.as_ref().is_none_or(|b| f < b.1) {
            self.best = Some((x.clone(), f, g.clone()));
        }
        let best = self.best.as_ref().map_or(f64::INFINITY, |b| b.1);
        (self.on_eval)(self.evals, f, g.norm(), best);
        (f, g)
    }
}

enum LineSearch {
    Found(f64, f64, DVector<f64>),
    Failed,
    Budget,
}

fn interpolate(lo: f64, hi: f64, f_lo: f64, d_lo: f64, f_hi: f64) -> f64 {
    let w = hi - lo;
    let denom = 2.0 * (f_hi - f_lo - d_lo * w);
    let mut a = if denom.is_finite() && denom.abs() > 0.0 { lo - d_lo * w * w / denom } else { f64::NAN };
    let (left, right) = if lo < hi { (lo, hi) } else { (hi, lo) };
    let margin = 0.1 * (right - left);
    if !a.is_finite() || a < left + margin || a > right - margin {
        a = 0.5 * (lo + hi);
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    ev: &mut Evaluator<'_, F>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    d0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64),
    opts: &LbfgsOptions,
) -> LineSearch
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    for _ in 0..opts.max_line_search {
        if ev.exhausted() {
            return LineSearch::Budget;
        }
        let a = interpolate(lo.0, hi.0, lo.1, lo.2, hi.1);
        if (a - lo.0).abs() < 1e-16 * a.abs().max(1.0) {
            break;
        }
        let xa = x + d * a;
        let (fa, ga) = ev.eval(&xa);
        let da = ga.dot(d);
        if fa > f0 + opts.c1 * a * d0 || fa >= lo.1 {
            hi = (a, fa);
        } else {
            if da.abs() <= -opts.c2 * d0 {
                return LineSearch::Found(a, fa, ga);
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = (lo.0, lo.1);
            }
            lo = (a, fa, da);
        }
    }
    if lo.0 > 0.0 && lo.1 < f0 {
        let xa = x + d * lo.0;
        // Re-use the best Armijo point; its gradient is in the evaluator cache.
        if let Some((bx, bf, bg)) = ev.best.clone() {
            if bx == xa {
                return LineSearch::Found(lo.0, bf, bg);
            }
        }
    }
    LineSearch::Failed
}

fn line_search<F>(
    ev: &mut Evaluator<'_, F>,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    d: &DVector<f64>,
    a_init: f64,
    opts: &LbfgsOptions,
) -> LineSearch
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let d0 = g0.dot(d);
    let mut prev = (0.0, f0, d0);
    let mut a = a_init;
    for i in 0..opts.max_line_search {
        if ev.exhausted() {
            return LineSearch::Budget;
        }
        let xa = x + d * a;
        let (fa, ga) = ev.eval(&xa);
        let da = ga.dot(d);
        if fa > f0 + opts.c1 * a * d0 || (i > 0 && fa >= prev.1) {
            return zoom(ev, x, d, f0, d0, prev, (a, fa), opts);
        }
        if da.abs() <= -opts.c2 * d0 {
            return LineSearch::Found(a, fa, ga);
        }
        if da >= 0.0 {
            return zoom(ev, x, d, f0, d0, (a, fa, da), (prev.0, prev.1), opts);
        }
        prev = (a, fa, da);
        a *= 2.0;
    }
    LineSearch::Failed
}

/// Minimise `f` from `x0`. `on_eval(count, value, grad_norm, best)` is called after
/// every function evaluation. The returned point is the best one seen.
pub fn minimize<F>(
    f: F,
    x0: &DVector<f64>,
    opts: &LbfgsOptions,
    on_eval: &mut dyn FnMut(usize, f64, f64, f64),
) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    if opts.max_evals == 0 {
        return LbfgsResult {
            x: x0.clone(),
            f: f64::NAN,
            g: DVector::zeros(x0.len()),
            evals: 0,
            iterations: 0,
            status: LbfgsStatus::NoEvaluations,
        };
    }
    let mut ev = Evaluator { f, evals: 0, max_evals: opts.max_evals, best: None, on_eval };
    let mut x = x0.clone();
    let (mut fx, mut gx) = ev.eval(&x);
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut status = LbfgsStatus::MaxEvals;
    let mut retried = false;
    if !fx.is_finite() {
        status = LbfgsStatus::LineSearchFailed;
    }
    while fx.is_finite() && !ev.exhausted() {
        if gx.amax() < opts.gtol {
            status = LbfgsStatus::Converged;
            break;
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut d = -q;
        if !(d.dot(&gx) < 0.0) {
            hist.clear();
            d = -gx.clone();
        }
        let a_init = if hist.is_empty() { (1.0 / gx.norm()).min(1.0) } else { 1.0 };
        match line_search(&mut ev, &x, fx, &gx, &d, a_init, opts) {
            LineSearch::Found(a, fa, ga) => {
                let s = &d * a;
                let y = &ga - &gx;
                let sy = s.dot(&y);
                let f_old = fx;
                x += &s;
                fx = fa;
                gx = ga;
                iterations += 1;
                retried = false;
                if sy > 1e-12 * s.norm() * y.norm() {
                    if hist.len() == opts.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                if (f_old - fx).abs() <= opts.ftol * f_old.abs().max(fx.abs()).max(1.0) {
                    status = LbfgsStatus::Converged;
                    break;
                }
            }
            LineSearch::Budget => {
                status = LbfgsStatus::MaxEvals;
                break;
            }
            LineSearch::Failed => {
                if retried || hist.is_empty() {
                    status = LbfgsStatus::LineSearchFailed;
                    break;
                }
                hist.clear();
                retried = true;
            }
        }
    }
    let (bx, bf, bg) = ev.best.clone().unwrap_or((x, fx, gx));
    LbfgsResult { x: bx, f: bf, g: bg, evals: ev.evals, iterations, status }
}
