use nalgebra::DVector;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { learning_rate, beta1, beta2, eps, m: DVector::zeros(dim), v: DVector::zeros(dim), t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Descent step on `x` for gradient `g`.
    pub fn step(&mut self, x: &mut DVector<f64>, g: &DVector<f64>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            x[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_learning_rate_size() {
        let mut a = Adam::new(2, 1e-3, 0.9, 0.999, 1e-8);
        let mut x = DVector::from_vec(vec![1.0, -1.0]);
        a.step(&mut x, &DVector::from_vec(vec![5.0, -0.1]));
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimises_quadratic() {
        let mut a = Adam::new(1, 0.05, 0.9, 0.999, 1e-8);
        let mut x = DVector::from_vec(vec![3.0]);
        for _ in 0..2000 {
            let g = DVector::from_vec(vec![2.0 * (x[0] - 1.0)]);
            a.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
