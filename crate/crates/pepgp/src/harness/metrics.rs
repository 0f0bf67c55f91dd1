use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and (population) variance of the training targets, in the units the
/// test targets are reported in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub var: f64,
}

impl TargetStats {
    pub fn of(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Metric("no training targets".into()));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, var })
    }
}

/// Regression metrics: `smse`, `smll`, plus the raw mean squared error and
/// mean negative log predictive density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub smse: f64,
    pub smll: f64,
    pub mse: f64,
    pub mnlp: f64,
}

fn gauss_nll(y: f64, m: f64, v: f64) -> f64 {
    0.5 * (LN_2PI + v.ln() + (y - m).powi(2) / v)
}

/// SMSE is the MSE over the variance of the test targets about the training
/// mean; SMLL is the mean negative log density minus that of the Gaussian
/// with the training mean and variance.
pub fn metrics_regression(mean: &[f64], var: &[f64], y_test: &[f64], train: &TargetStats) -> Result<RegressionMetrics> {
    let n = y_test.len();
    if n == 0 || mean.len() != n || var.len() != n {
        return Err(Error::Metric(format!("lengths {} / {} / {n}", mean.len(), var.len())));
    }
    if let Some(i) = var.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Metric(format!("predictive variance {} at test point {i}", var[i])));
    }
    if !(train.var > 0.0) {
        return Err(Error::Metric("training targets have zero variance".into()));
    }
    let nf = n as f64;
    let ref_var = y_test.iter().map(|y| (y - train.mean).powi(2)).sum::<f64>() / nf;
    if !(ref_var > 0.0) {
        return Err(Error::Metric("test targets have zero variance about the training mean".into()));
    }
    let mse = mean.iter().zip(y_test).map(|(m, y)| (y - m).powi(2)).sum::<f64>() / nf;
    let mnlp = (0..n).map(|i| gauss_nll(y_test[i], mean[i], var[i])).sum::<f64>() / nf;
    let trivial = y_test.iter().map(|&y| gauss_nll(y, train.mean, train.var)).sum::<f64>() / nf;
    let out = RegressionMetrics { smse: mse / ref_var, smll: mnlp - trivial, mse, mnlp };
    if [out.smse, out.smll].iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite regression metric".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub error: f64,
    pub nll: f64,
}

/// `prob` is `p(y = +1)`; labels are `±1`. Probabilities are clamped to
/// `[1e-12, 1 - 1e-12]` before taking logs.
pub fn metrics_classification(prob: &[f64], labels: &[f64]) -> Result<ClassificationMetrics> {
    if prob.is_empty() || prob.len() != labels.len() {
        return Err(Error::Metric(format!("{} probabilities for {} labels", prob.len(), labels.len())));
    }
    let n = prob.len() as f64;
    let mut wrong = 0usize;
    let mut nll = 0.0;
    for (&p, &y) in prob.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        let positive = y > 0.0;
        if (p >= 0.5) != positive {
            wrong += 1;
        }
        nll -= if positive { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(ClassificationMetrics { error: wrong as f64 / n, nll: nll / n })
}
