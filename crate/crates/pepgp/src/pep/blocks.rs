use nalgebra::{DMatrix, DVector};

use super::PosteriorState;
use crate::energy::BlockPartition;
use crate::kernel::gram;
use crate::linalg::{JitterChol, LowRankSystem};
use crate::{Error, Result};

/// Block site `N(W_bᵀ u; g_b, V_b)` over the data in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSite {
    pub indices: Vec<usize>,
    pub g: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Dense residual `D_b = K_bb - Q_bb` for one block.
pub(crate) fn block_residual(sys: &LowRankSystem, idx: &[usize]) -> Result<DMatrix<f64>> {
    if idx.len() == 1 {
        return Ok(DMatrix::from_element(1, 1, sys.diag_d()[idx[0]]));
    }
    let xb = sys.x().select_rows(idx);
    let kbb = gram(&xb, &xb, sys.hyper())?;
    let vb = sys.v().select_columns(idx);
    Ok(kbb - vb.transpose() * vb)
}

/// Fixed-point sites for a Gaussian likelihood: `g_b = y_b`,
/// `V_b = α_b D_b + σ² I`.
pub fn gaussian_block_sites(
    sys: &LowRankSystem,
    y: &[f64],
    partition: &BlockPartition,
    noise: f64,
) -> Result<Vec<BlockSite>> {
    partition.check(sys.num_data(), sys.num_pseudo())?;
    if y.len() != sys.num_data() {
        return Err(Error::arg("target length does not match the data"));
    }
    partition
        .blocks()
        .iter()
        .zip(partition.alphas())
        .map(|(idx, &a)| {
            let d = block_residual(sys, idx)?;
            let mut v = d * a;
            for i in 0..idx.len() {
                v[(i, i)] += noise;
            }
            Ok(BlockSite { indices: idx.clone(), g: DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i])), v })
        })
        .collect()
}

/// `(γ, β)` implied by a set of block sites.
pub fn posterior_from_block_sites(sys: &LowRankSystem, sites: &[BlockSite]) -> Result<PosteriorState> {
    let m = sys.num_pseudo();
    let mut a = DMatrix::identity(m, m);
    let mut r = DVector::zeros(m);
    for s in sites {
        let vb = sys.v().select_columns(&s.indices);
        let cs = JitterChol::exact(&s.v)?;
        let vt = cs.solve_lower(&vb.transpose());
        a += vt.transpose() * &vt;
        r += vb * cs.solve_vec(&s.g);
    }
    let ca = JitterChol::exact(&a)?;
    let l = sys.chol_uu();
    let gamma = l.solve_upper_vec(&ca.solve_vec(&r));
    let inner = DMatrix::identity(m, m) - ca.inverse();
    let beta = l.solve_upper(&l.solve_upper(&inner).transpose());
    Ok(PosteriorState { gamma, beta: (&beta + beta.transpose()) * 0.5 })
}
