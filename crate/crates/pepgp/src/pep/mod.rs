//! Power EP over pseudo-points: sites, posterior summary, the
//! deletion/projection/update sweep, prediction and the PEP energy.
//!
//! The posterior over the pseudo-outputs `u` is summarised by `(γ, β)` with
//! `m_f = K_fu γ` and `V_ff' = K_ff' - K_fu β K_uf'`. Each site is a Gaussian
//! in the projection `w_nᵀ u`, with `w_n = K_uu⁻¹ k_n`.

mod blocks;
mod energy;
mod ops;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Exec, Result};

pub use blocks::{gaussian_block_sites, posterior_from_block_sites, BlockSite};
pub(crate) use blocks::block_residual as blocks_residual;
pub use energy::{pep_energy, site_energy_terms, SiteEnergyTerm};
pub use ops::{
    delete, include_site, init_state, posterior_from_sites, predict, predict_at, predict_probit, predict_with, project, run_pep, sweep,
    update_site, PepDiagnostics, PepRun, Prediction, SweepStats,
};

/// Smallest power used inside the iterative loop.
pub const ALPHA_MIN: f64 = 1e-6;

/// Rank-1 site `N(w_nᵀ u; g, v)`; `v = ∞` is a flat (uninitialised) site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteFactor {
    pub g: f64,
    pub v: f64,
}

impl SiteFactor {
    pub const FLAT: SiteFactor = SiteFactor { g: 0.0, v: f64::INFINITY };

    pub fn new(g: f64, v: f64) -> Result<Self> {
        if v == 0.0 || v.is_nan() || !g.is_finite() {
            return Err(Error::arg(format!("invalid site (g={g}, v={v})")));
        }
        Ok(Self { g, v })
    }

    pub fn is_flat(&self) -> bool {
        self.v.is_infinite()
    }

    /// Natural precision `1/v`.
    pub fn precision(&self) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            1.0 / self.v
        }
    }

    /// Natural shift `g/v`.
    pub fn shift(&self) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            self.g / self.v
        }
    }

    /// Inverse of `(shift, precision)`; `None` for an improper combination.
    pub fn from_natural(shift: f64, precision: f64) -> Option<Self> {
        if precision == 0.0 {
            return (shift == 0.0).then_some(Self::FLAT);
        }
        let v = 1.0 / precision;
        let g = shift * v;
        (v.is_finite() && g.is_finite() && v != 0.0).then_some(Self { g, v })
    }
}

/// `(γ, β)` summary of `q(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub gamma: DVector<f64>,
    pub beta: DMatrix<f64>,
}

impl PosteriorState {
    pub fn prior(m: usize) -> Self {
        Self { gamma: DVector::zeros(m), beta: DMatrix::zeros(m, m) }
    }

    pub fn num_pseudo(&self) -> usize {
        self.gamma.len()
    }

    /// Mean of `u`: `K_uu γ`.
    pub fn mean_u(&self, k_uu: &DMatrix<f64>) -> DVector<f64> {
        k_uu * &self.gamma
    }

    /// Covariance of `u`: `K_uu - K_uu β K_uu`.
    pub fn cov_u(&self, k_uu: &DMatrix<f64>) -> DMatrix<f64> {
        k_uu - k_uu * &self.beta * k_uu
    }
}

/// Posterior with an α-fraction of one site removed, with its marginal at
/// that site's input.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityState {
    pub index: usize,
    pub gamma: DVector<f64>,
    pub beta: DMatrix<f64>,
    /// Cavity mean of `f_n`.
    pub mean: f64,
    /// Cavity variance of `f_n` (includes `D_nn`).
    pub var: f64,
    /// Cavity variance of `w_nᵀ u`.
    pub proj_var: f64,
}

/// Iterative PEP settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PepConfig {
    pub alpha: f64,
    /// Per-datum powers overriding `alpha`.
    pub alpha_per_block: Option<Vec<f64>>,
    pub damping: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub parallel_updates: bool,
    pub minibatch_size: Option<usize>,
    pub seed: u64,
    /// Rebuild `(γ, β)` from the sites after each sweep.
    pub refresh_each_sweep: bool,
    pub exec: Exec,
}

impl PepConfig {
    /// Defaults for a Gaussian likelihood (no damping).
    pub fn gaussian(alpha: f64) -> Self {
        Self {
            alpha,
            alpha_per_block: None,
            damping: 1.0,
            tol: 1e-6,
            max_sweeps: 100,
            parallel_updates: false,
            minibatch_size: None,
            seed: 0,
            refresh_each_sweep: true,
            exec: Exec::default(),
        }
    }

    /// Defaults for non-Gaussian likelihoods (damping 0.5).
    pub fn classification(alpha: f64) -> Self {
        Self { damping: 0.5, ..Self::gaussian(alpha) }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok_alpha = |a: f64| a > 0.0 && a <= 1.0;
        if !ok_alpha(self.alpha) {
            return Err(Error::arg(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if let Some(a) = &self.alpha_per_block {
            if a.len() != n {
                return Err(Error::arg(format!("{} per-datum powers for {n} data", a.len())));
            }
            if let Some(bad) = a.iter().find(|&&x| !ok_alpha(x)) {
                return Err(Error::arg(format!("per-datum power {bad} outside (0, 1]")));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::arg(format!("damping {} outside (0, 1]", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::arg("tolerance must be positive"));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::arg("minibatch size must be positive"));
        }
        Ok(())
    }

    /// Power used for datum `n`, clamped below at [`ALPHA_MIN`].
    pub fn alpha_for(&self, n: usize) -> f64 {
        let a = self.alpha_per_block.as_ref().map_or(self.alpha, |v| v[n]);
        a.max(ALPHA_MIN)
    }
}
