use nalgebra::{DMatrix, DVector};

use super::ops::{cavity_marginal, site_view, SiteView};
use super::{PepConfig, PosteriorState, SiteFactor};
use crate::likelihood::Likelihood;
use crate::linalg::{JitterChol, LowRankSystem};
use crate::{Error, Result};

/// Per-site ingredients of the PEP energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteEnergyTerm {
    /// `log Z̃_n` at the cavity.
    pub log_z: f64,
    /// `𝒢(q_cav) - 𝒢(q)`.
    pub delta_g: f64,
}

/// Change of the log-normaliser when a rank-1 factor with natural
/// parameters `(shift, prec)` along the site direction is multiplied in.
pub(crate) fn delta_log_normaliser(view: &SiteView, shift: f64, prec: f64) -> f64 {
    let denom = 1.0 + prec * view.p;
    -0.5 * denom.ln()
        + 0.5 * (2.0 * view.mu * shift + shift * shift * view.p - prec * view.mu * view.mu) / denom
}

/// Tilted log-normalisers and cavity log-normaliser differences at the
/// current posterior. `None` marks a site whose cavity is invalid.
pub fn site_energy_terms(
    sys: &LowRankSystem,
    state: &PosteriorState,
    sites: &[SiteFactor],
    y: &[f64],
    lik: &dyn Likelihood,
    cfg: &PepConfig,
) -> Vec<Option<SiteEnergyTerm>> {
    cfg.exec.map(sites.len(), |n| {
        let alpha = cfg.alpha_for(n);
        let site = &sites[n];
        let view = site_view(sys, state, n);
        let cav = cavity_marginal(sys, &view, site, alpha, n).ok()?;
        let tm = lik.tilted(y[n], cav.mean, cav.var, alpha).ok()?;
        let delta_g = delta_log_normaliser(&view, -alpha * site.shift(), -alpha * site.precision());
        Some(SiteEnergyTerm { log_z: tm.log_z, delta_g })
    })
}

/// `𝒢(q) - 𝒢(p)` for the posterior implied by `sites`:
/// `-½ log|A'| + ½ (Vη)ᵀ A'⁻¹ (Vη)`, `A' = I + V Λ Vᵀ`.
pub(crate) fn global_term(sys: &LowRankSystem, sites: &[SiteFactor]) -> Result<f64> {
    let m = sys.num_pseudo();
    let v = sys.v();
    let prec = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.precision()));
    let shift = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.shift()));
    let mut vl = v.clone();
    for (j, mut col) in vl.column_iter_mut().enumerate() {
        col *= prec[j];
    }
    let a = DMatrix::identity(m, m) + &vl * v.transpose();
    let ca = JitterChol::exact(&a)?;
    let b = v * shift;
    let t = ca.solve_lower_vec(&b);
    Ok(-0.5 * ca.logdet() + 0.5 * t.norm_squared())
}

/// Power-EP approximation to `log p(y)`:
/// `𝒢(q) - 𝒢(p) + Σ_n (1/α_n) [log Z̃_n + 𝒢(q_cav,n) - 𝒢(q)]`.
///
/// A missing term is allowed only for a flat site, which contributes nothing.
pub fn pep_energy(
    sys: &LowRankSystem,
    sites: &[SiteFactor],
    terms: &[Option<SiteEnergyTerm>],
    cfg: &PepConfig,
) -> Result<f64> {
    if sites.len() != terms.len() || sites.len() != sys.num_data() {
        return Err(Error::State("site and term counts differ".into()));
    }
    let mut total = global_term(sys, sites)?;
    for (n, (site, term)) in sites.iter().zip(terms).enumerate() {
        match term {
            Some(t) => total += (t.log_z + t.delta_g) / cfg.alpha_for(n),
            None if site.is_flat() => {}
            None => return Err(Error::State(format!("missing tilted normaliser for site {n}"))),
        }
    }
    Ok(total)
}
