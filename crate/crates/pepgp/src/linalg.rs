//! Cholesky with a jitter ladder and the low-rank-plus-diagonal kernels.

use nalgebra::{DMatrix, DVector};

use crate::kernel::{gram_with, KernelHyper};
use crate::{Error, Exec, Result};

/// Jitter multipliers of `mean(diag A)`, tried in order.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Relative asymmetry accepted by [`chol_psd`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone)]
pub struct JitterChol {
    l: DMatrix<f64>,
    jitter: f64,
}

/// Plain Cholesky without jitter; `None` when not positive definite.
fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(a.clone()).map(|c| c.unpack())
}

/// Factor a symmetric PSD matrix, escalating jitter until it succeeds.
pub fn chol_psd(a: &DMatrix<f64>) -> Result<JitterChol> {
    if !a.is_square() {
        return Err(Error::arg(format!("cholesky of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("cholesky input has non-finite entries".into()));
    }
    let n = a.nrows();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::arg(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let mean_diag = if n == 0 { 1.0 } else { sym.diagonal().mean() };
    let base = if mean_diag.is_finite() && mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut tried = Vec::with_capacity(JITTER_LADDER.len());
    for mult in JITTER_LADDER {
        let jitter = mult * base;
        tried.push(jitter);
        let mut m = sym.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(l) = cholesky_lower(&m) {
            return Ok(JitterChol { l, jitter });
        }
    }
    Err(Error::Cholesky { ladder: tried })
}

impl JitterChol {
    /// Factor with no jitter at all; fails rather than perturbing.
    pub fn exact(a: &DMatrix<f64>) -> Result<Self> {
        let sym = (a + a.transpose()) * 0.5;
        cholesky_lower(&sym)
            .map(|l| JitterChol { l, jitter: 0.0 })
            .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻ᵀ B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `(L Lᵀ)⁻¹ b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// `log |L Lᵀ|`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// The factored matrix `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Cached pseudo-point quantities for a dataset `X`, pseudo-inputs `Z` and
/// kernel `h`.
///
/// `K_uu` denotes the factored matrix `K(Z, Z) + jitter·I`; every derived
/// quantity uses the same jittered matrix so that the algebra stays
/// consistent.
#[derive(Debug, Clone)]
pub struct LowRankSystem {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    hyper: KernelHyper,
    k_uu: DMatrix<f64>,
    chol_uu: JitterChol,
    k_uf: DMatrix<f64>,
    v: DMatrix<f64>,
    w: DMatrix<f64>,
    diag_kff: DVector<f64>,
    diag_q: DVector<f64>,
    diag_d: DVector<f64>,
}

impl LowRankSystem {
    pub fn new(x: &DMatrix<f64>, z: &DMatrix<f64>, h: &KernelHyper) -> Result<Self> {
        Self::new_with(Exec::default(), x, z, h)
    }

    pub fn new_with(exec: Exec, x: &DMatrix<f64>, z: &DMatrix<f64>, h: &KernelHyper) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::arg("at least one pseudo-input is required"));
        }
        let mut k_uu = gram_with(exec, z, z, h)?;
        let chol_uu = chol_psd(&k_uu)?;
        for i in 0..k_uu.nrows() {
            k_uu[(i, i)] += chol_uu.jitter();
        }
        let k_uf = gram_with(exec, z, x, h)?;
        let v = chol_uu.solve_lower(&k_uf);
        let w = chol_uu.solve_upper(&v);
        let n = x.nrows();
        let diag_kff = DVector::from_element(n, h.signal_var());
        let diag_q = DVector::from_iterator(n, v.column_iter().map(|c| c.norm_squared()));
        let diag_d = DVector::from_iterator(n, (0..n).map(|i| (diag_kff[i] - diag_q[i]).max(0.0)));
        Ok(Self {
            x: x.clone(),
            z: z.clone(),
            hyper: h.clone(),
            k_uu,
            chol_uu,
            k_uf,
            v,
            w,
            diag_kff,
            diag_q,
            diag_d,
        })
    }

    pub fn num_data(&self) -> usize {
        self.k_uf.ncols()
    }

    pub fn num_pseudo(&self) -> usize {
        self.k_uu.nrows()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    /// `K(Z, Z) + jitter·I`.
    pub fn k_uu(&self) -> &DMatrix<f64> {
        &self.k_uu
    }

    pub fn chol_uu(&self) -> &JitterChol {
        &self.chol_uu
    }

    pub fn jitter(&self) -> f64 {
        self.chol_uu.jitter()
    }

    pub fn k_uf(&self) -> &DMatrix<f64> {
        &self.k_uf
    }

    /// `L⁻¹ K_uf` with `L = chol(K_uu)`; `Q_ff = Vᵀ V`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `K_uu⁻¹ K_uf`; column `n` is the site projection `w_n`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn diag_kff(&self) -> &DVector<f64> {
        &self.diag_kff
    }

    pub fn diag_q(&self) -> &DVector<f64> {
        &self.diag_q
    }

    /// `max(K_nn - Q_nn, 0)`.
    pub fn diag_d(&self) -> &DVector<f64> {
        &self.diag_d
    }
}

/// Factorisation of `K̄ = Vᵀ V + diag(d)` through `A' = I + V diag(d)⁻¹ Vᵀ`.
#[derive(Debug, Clone)]
pub struct DiagLowRank {
    d: DVector<f64>,
    chol_a: JitterChol,
}

impl DiagLowRank {
    pub fn new(v: &DMatrix<f64>, d: &DVector<f64>) -> Result<Self> {
        if v.ncols() != d.len() {
            return Err(Error::arg("diagonal length does not match the low-rank factor"));
        }
        for (index, &value) in d.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveDiagonal { index, value });
            }
        }
        let m = v.nrows();
        let mut vs = v.clone();
        for (j, mut col) in vs.column_iter_mut().enumerate() {
            col /= d[j].sqrt();
        }
        let a = DMatrix::identity(m, m) + &vs * vs.transpose();
        let chol_a = JitterChol::exact(&a)?;
        Ok(Self { d: d.clone(), chol_a })
    }

    pub fn logdet(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum::<f64>() + self.chol_a.logdet()
    }

    pub fn solve(&self, v: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        let b_inv_r = rhs.component_div(&self.d);
        let t = self.chol_a.solve_vec(&(v * &b_inv_r));
        b_inv_r - (v.transpose() * t).component_div(&self.d)
    }
}

/// `K̄⁻¹ rhs` and `log |K̄|` for `K̄ = Q_ff + diag(α_scaled_diag) + noise·I`
/// in `O(N M²)`.
pub fn low_rank_solve_logdet(
    sys: &LowRankSystem,
    alpha_scaled_diag: &DVector<f64>,
    noise: f64,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = sys.num_data();
    if alpha_scaled_diag.len() != n || rhs.len() != n {
        return Err(Error::arg(format!("expected vectors of length {n}")));
    }
    let d = alpha_scaled_diag.add_scalar(noise);
    let f = DiagLowRank::new(sys.v(), &d)?;
    Ok((f.solve(sys.v(), rhs), f.logdet()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_factor_has_no_jitter() {
        let c = chol_psd(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(c.jitter(), 0.0);
        assert_eq!(c.l(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn hand_cholesky() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let c = chol_psd(&a).unwrap();
        assert_eq!(c.jitter(), 0.0);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]);
        assert_relative_eq!(c.l(), &expect, epsilon = 1e-15);
        assert_relative_eq!(c.logdet(), 16.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn rank_deficient_needs_jitter() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let c = chol_psd(&a).unwrap();
        assert!(c.jitter() > 0.0);
        let mut aj = a.clone();
        aj[(0, 0)] += c.jitter();
        aj[(1, 1)] += c.jitter();
        assert_relative_eq!(c.reconstruct(), aj, epsilon = 1e-14);
    }

    #[test]
    fn indefinite_exhausts_ladder() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match chol_psd(&a) {
            Err(Error::Cholesky { ladder }) => assert_eq!(ladder.len(), JITTER_LADDER.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(chol_psd(&a), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_projection_gives_diagonal_system() {
        let v = DMatrix::zeros(3, 5);
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0]);
        let f = DiagLowRank::new(&v, &d).unwrap();
        assert_relative_eq!(f.solve(&v, &r), r.component_div(&d), epsilon = 1e-15);
        assert_relative_eq!(f.logdet(), d.iter().map(|x| x.ln()).sum::<f64>(), epsilon = 1e-14);
    }

    #[test]
    fn nonpositive_diagonal_names_index() {
        let v = DMatrix::zeros(1, 3);
        let d = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        assert!(matches!(DiagLowRank::new(&v, &d), Err(Error::NonPositiveDiagonal { index: 1, .. })));
    }
}
