use nalgebra::DVector;

use crate::Result;

/// Per-coordinate comparison of an analytic gradient with central
/// differences. The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub worst_rel: f64,
    pub worst_index: Option<usize>,
    pub failing: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

pub fn grad_check<F>(mut objective: F, params: &DVector<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (_, g) = objective(params)?;
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut xp = params.clone();
        let mut xm = params.clone();
        xp[i] += step;
        xm[i] -= step;
        let fp = objective(&xp)?.0;
        let fm = objective(&xm)?.0;
        numeric.push((fp - fm) / (2.0 * step));
    }
    let analytic: Vec<f64> = g.iter().copied().collect();
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .collect();
    let (worst_index, worst_rel) = rel_errors
        .iter()
        .enumerate()
        .fold((None, 0.0f64), |acc, (i, &e)| if e > acc.1 || acc.0.is_none() { (Some(i), e) } else { acc });
    let failing = rel_errors.iter().enumerate().filter(|(_, e)| !(**e <= tolerance)).map(|(i, _)| i).collect();
    Ok(GradCheckReport { analytic, numeric, rel_errors, worst_rel, worst_index, failing })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let f = 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1] * x[1] + 0.5 * x[1];
        Ok((f, DVector::from_vec(vec![6.0 * x[0] + x[1], x[0] - 4.0 * x[1] + 0.5])))
    }

    #[test]
    fn exact_on_quadratic() {
        let r = grad_check(quadratic, &DVector::from_vec(vec![0.3, -1.1]), 1e-3, 1e-10).unwrap();
        assert!(r.passed());
        assert!(r.worst_rel <= 1e-10, "{}", r.worst_rel);
    }

    #[test]
    fn flags_broken_gradient() {
        let broken = |x: &DVector<f64>| {
            let (f, mut g) = quadratic(x)?;
            g[1] += 1.0;
            Ok((f, g))
        };
        let r = grad_check(broken, &DVector::from_vec(vec![0.3, -1.1]), 1e-5, 1e-5).unwrap();
        assert_eq!(r.failing, vec![1]);
        assert_eq!(r.worst_index, Some(1));
    }
}
