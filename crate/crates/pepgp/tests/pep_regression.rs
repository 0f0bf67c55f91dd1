//! Iterative PEP with a Gaussian likelihood against the collapsed closed
//! forms and dense oracles.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pepgp::energy::{collapsed_posterior, pep_regression_energy, BlockPartition};
use pepgp::likelihood::{gaussian_tilted, GaussianLik};
use pepgp::pep::{
    delete, gaussian_block_sites, include_site, init_state, posterior_from_block_sites, predict, project, run_pep,
    sweep, update_site, PepConfig, SiteFactor,
};

fn gaussian_run(inst: &Instance, alpha: f64) -> pepgp::pep::PepRun {
    let sys = inst.system();
    let lik = GaussianLik::new(inst.h.noise_var()).unwrap();
    run_pep(&sys, &inst.y, &lik, &PepConfig::gaussian(alpha)).unwrap()
}

#[test]
fn iterative_alpha_one_matches_dense_fitc() {
    for seed in 0..10 {
        let (n, m) = random_sizes(seed, 60, 8);
        let inst = regression_instance(seed, n, m, 2);
        let sys = inst.system();
        let run = gaussian_run(&inst, 1.0);
        let singles: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let oracle = dense_sparse(&sys, &inst.y, &singles, 1.0);
        assert!(rel_err_vec(&run.state.mean_u(sys.k_uu()), &oracle.mean_u) < 1e-8, "seed {seed}");
        assert!(rel_err(&run.state.cov_u(sys.k_uu()), &oracle.cov_u) < 1e-8, "seed {seed}");
        assert!(rel_err_scalar(run.energy, oracle.energy) < 1e-8, "seed {seed}: {} vs {}", run.energy, oracle.energy);
    }
}

#[test]
fn iterative_matches_collapsed_for_fractional_powers() {
    for seed in 0..6 {
        let (n, m) = random_sizes(seed + 100, 60, 8);
        let inst = regression_instance(seed + 100, n, m, 3);
        let sys = inst.system();
        for alpha in [0.25, 0.5, 1.0] {
            let run = gaussian_run(&inst, alpha);
            let part = BlockPartition::singletons(n, alpha).unwrap();
            let post = collapsed_posterior(&sys, &inst.y, &part).unwrap();
            let e = pep_regression_energy(&sys, &inst.y, &part).unwrap();
            assert!(rel_err_vec(&run.state.gamma, &post.gamma) < 1e-8, "seed {seed} alpha {alpha}");
            assert!(rel_err(&run.state.beta, &post.beta) < 1e-8, "seed {seed} alpha {alpha}");
            assert!(rel_err_scalar(run.energy, e) < 1e-8, "seed {seed} alpha {alpha}: {} vs {e}", run.energy);
        }
    }
}

#[test]
fn collapsed_energy_matches_dense_formula() {
    let inst = regression_instance(7, 40, 5, 2);
    let sys = inst.system();
    for alpha in [0.1, 0.5, 1.0] {
        let singles: Vec<Vec<usize>> = (0..40).map(|i| vec![i]).collect();
        let oracle = dense_sparse(&sys, &inst.y, &singles, alpha);
        let e = pep_regression_energy(&sys, &inst.y, &BlockPartition::singletons(40, alpha).unwrap()).unwrap();
        assert!(rel_err_scalar(e, oracle.energy) < 1e-10, "alpha {alpha}");
    }
}

#[test]
fn single_pass_reaches_fixed_point() {
    for seed in 0..5 {
        let inst = regression_instance(seed + 200, 40, 6, 2);
        let sys = inst.system();
        let lik = GaussianLik::new(inst.h.noise_var()).unwrap();
        for alpha in [0.25, 0.5, 1.0] {
            let cfg = PepConfig::gaussian(alpha);
            let (mut state, mut sites) = init_state(6, 40);
            sweep(&sys, &mut state, &mut sites, &inst.y, &lik, &cfg, None).unwrap();
            let second = sweep(&sys, &mut state, &mut sites, &inst.y, &lik, &cfg, None).unwrap();
            assert!(second.max_change <= 1e-9, "alpha {alpha}: {}", second.max_change);
            for (i, s) in sites.iter().enumerate() {
                let v = alpha * sys.diag_d()[i] + inst.h.noise_var();
                assert!(rel_err_scalar(s.g, inst.y[i]) < 1e-9);
                assert!((s.v - v).abs() / v < 1e-9);
            }
        }
    }
}

#[test]
fn extra_sweep_is_idempotent() {
    let inst = regression_instance(3, 30, 5, 2);
    let sys = inst.system();
    let lik = GaussianLik::new(inst.h.noise_var()).unwrap();
    let cfg = PepConfig::gaussian(0.5);
    let run = run_pep(&sys, &inst.y, &lik, &cfg).unwrap();
    assert!(run.diagnostics.converged && run.diagnostics.sweeps <= 2);
    let mut state = run.state.clone();
    let mut sites = run.sites.clone();
    sweep(&sys, &mut state, &mut sites, &inst.y, &lik, &cfg, None).unwrap();
    assert!(max_abs(&(&state.beta - &run.state.beta)) <= 1e-9);
    assert!((&state.gamma - &run.state.gamma).amax() <= 1e-9);
}

#[test]
fn parallel_updates_reach_the_same_fixed_point() {
    let inst = regression_instance(11, 50, 6, 2);
    let sys = inst.system();
    let lik = GaussianLik::new(inst.h.noise_var()).unwrap();
    let mut cfg = PepConfig::gaussian(0.5);
    cfg.parallel_updates = true;
    let run = run_pep(&sys, &inst.y, &lik, &cfg).unwrap();
    let post = collapsed_posterior(&sys, &inst.y, &BlockPartition::singletons(50, 0.5).unwrap()).unwrap();
    assert!(rel_err_vec(&run.state.gamma, &post.gamma) < 1e-8);
}

#[test]
fn delete_then_reinclude_restores_state() {
    let inst = regression_instance(5, 20, 4, 2);
    let sys = inst.system();
    let run = gaussian_run(&inst, 0.5);
    for n in [0, 7, 19] {
        let cav = delete(&sys, &run.state, n, &run.sites[n], 0.5).unwrap();
        let mut state = pepgp::pep::PosteriorState { gamma: cav.gamma.clone(), beta: cav.beta.clone() };
        let frac = SiteFactor::from_natural(0.5 * run.sites[n].shift(), 0.5 * run.sites[n].precision()).unwrap();
        include_site(&sys, &mut state, n, &SiteFactor::FLAT, &frac).unwrap();
        assert!((&state.gamma - &run.state.gamma).amax() < 1e-10);
        assert!(max_abs(&(&state.beta - &run.state.beta)) < 1e-10);
    }
}

#[test]
fn cavity_matches_dense_natural_parameter_division() {
    let inst = regression_instance(8, 8, 3, 2);
    let sys = inst.system();
    let alpha = 0.5;
    let run = gaussian_run(&inst, alpha);
    let kinv = sys.k_uu().clone().try_inverse().unwrap();
    let prec = run.state.cov_u(sys.k_uu()).try_inverse().unwrap();
    let shift = &prec * run.state.mean_u(sys.k_uu());
    for n in 0..8 {
        let w = &kinv * sys.k_uf().column(n);
        let s = run.sites[n];
        let cav_prec = &prec - &w * w.transpose() * (alpha * s.precision());
        let cav_shift = &shift - &w * (alpha * s.shift());
        let cav = delete(&sys, &run.state, n, &s, alpha).unwrap();
        let cov = sys.k_uu() - sys.k_uu() * &cav.beta * sys.k_uu();
        let mean = sys.k_uu() * &cav.gamma;
        let cov_oracle = cav_prec.clone().try_inverse().unwrap();
        assert!(rel_err(&cov, &cov_oracle) < 1e-9);
        assert!(rel_err_vec(&mean, &(cov_oracle * cav_shift)) < 1e-9);
        // Marginal at x_n includes the residual.
        let var = (w.transpose() * &cov * &w)[(0, 0)] + sys.diag_d()[n];
        assert!((cav.var - var).abs() < 1e-9);
    }
}

#[test]
fn projection_matches_quadrature_moments() {
    // Tilted moments of u by brute-force quadrature over f_n: u | f_n is
    // Gaussian, so the tilted mean and covariance follow from the tilted
    // moments of f_n alone.
    let inst = regression_instance(9, 5, 3, 2);
    let sys = inst.system();
    let alpha = 0.7;
    let s2 = inst.h.noise_var();
    let run = gaussian_run(&inst, 0.3);
    let gh = pepgp::likelihood::GaussHermite::new(200).unwrap();
    for n in 0..5 {
        let cav = delete(&sys, &run.state, n, &run.sites[n], alpha).unwrap();
        let tm = gaussian_tilted(cav.mean, cav.var, inst.y[n], alpha, s2).unwrap();
        let post = project(&sys, &cav, &tm).unwrap();
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for (x, w) in gh.nodes.iter().zip(&gh.weights) {
            let f = cav.mean + (2.0 * cav.var).sqrt() * x;
            let l = (-(inst.y[n] - f).powi(2) / (2.0 * s2)).exp().powf(alpha);
            z0 += w * l;
            z1 += w * l * f;
            z2 += w * l * f * f;
        }
        let mf = z1 / z0;
        let vf = z2 / z0 - mf * mf;
        let k = sys.k_uu();
        let cov_cav = k - k * &cav.beta * k;
        let c = &cov_cav * sys.w().column(n);
        let mean_cav = k * &cav.gamma;
        let mean = &mean_cav + &c * ((mf - cav.mean) / cav.var);
        let cov = &cov_cav + &c * c.transpose() * ((vf - cav.var) / (cav.var * cav.var));
        assert!(rel_err_vec(&post.mean_u(k), &mean) < 1e-7, "n {n}");
        assert!(rel_err(&post.cov_u(k), &cov) < 1e-7, "n {n}");
    }
}

#[test]
fn fixed_point_sites_reproduce_analytic_assignment() {
    let inst = regression_instance(12, 30, 5, 2);
    let sys = inst.system();
    let alpha = 0.5;
    let s2 = inst.h.noise_var();
    let run = gaussian_run(&inst, alpha);
    let part = BlockPartition::singletons(30, alpha).unwrap();
    let analytic = posterior_from_block_sites(&sys, &gaussian_block_sites(&sys, &inst.y, &part, s2).unwrap()).unwrap();
    assert!(rel_err(&run.state.beta, &analytic.beta) < 1e-9);
    // Updating a converged site changes nothing.
    for n in 0..30 {
        let cav = delete(&sys, &run.state, n, &run.sites[n], alpha).unwrap();
        let tm = gaussian_tilted(cav.mean, cav.var, inst.y[n], alpha, s2).unwrap();
        let s = update_site(&run.sites[n], &cav, &tm, alpha, 1.0).unwrap();
        assert!((s.g - run.sites[n].g).abs() < 1e-12 * s.g.abs().max(1.0));
        assert!((s.v - run.sites[n].v).abs() < 1e-12 * s.v);
    }
}

#[test]
fn damping_is_convex_in_natural_parameters() {
    let inst = regression_instance(13, 6, 2, 1);
    let sys = inst.system();
    let (state, sites) = init_state(2, 6);
    let cav = delete(&sys, &state, 0, &sites[0], 1.0).unwrap();
    let tm = gaussian_tilted(cav.mean, cav.var, inst.y[0], 1.0, inst.h.noise_var()).unwrap();
    let once = update_site(&sites[0], &cav, &tm, 1.0, 0.75).unwrap();
    let half = update_site(&sites[0], &cav, &tm, 1.0, 0.5).unwrap();
    let twice = update_site(&half, &cav, &tm, 1.0, 0.5).unwrap();
    assert!((once.precision() - twice.precision()).abs() < 1e-14);
    assert!((once.shift() - twice.shift()).abs() < 1e-14);
}

#[test]
fn pitc_blocks_match_dense_formulas() {
    let inst = regression_instance(21, 48, 12, 2);
    let sys = inst.system();
    let part = BlockPartition::contiguous(48, 4, 1.0).unwrap();
    let sites = gaussian_block_sites(&sys, &inst.y, &part, inst.h.noise_var()).unwrap();
    let state = posterior_from_block_sites(&sys, &sites).unwrap();
    let oracle = dense_sparse(&sys, &inst.y, part.blocks(), 1.0);
    let k = sys.k_uu();
    assert!(rel_err_vec(&state.mean_u(k), &oracle.mean_u) < 1e-8);
    assert!(rel_err(&state.cov_u(k), &oracle.cov_u) < 1e-8);
    let e = pep_regression_energy(&sys, &inst.y, &part).unwrap();
    assert!(rel_err_scalar(e, oracle.energy) < 1e-8);
    let collapsed = collapsed_posterior(&sys, &inst.y, &part).unwrap();
    assert!(rel_err(&collapsed.beta, &state.beta) < 1e-8);
}

#[test]
fn fractional_block_energy_matches_dense() {
    let inst = regression_instance(22, 24, 8, 2);
    let sys = inst.system();
    for alpha in [0.2, 0.6] {
        let part = BlockPartition::contiguous(24, 4, alpha).unwrap();
        let oracle = dense_sparse(&sys, &inst.y, part.blocks(), alpha);
        let e = pep_regression_energy(&sys, &inst.y, &part).unwrap();
        assert!(rel_err_scalar(e, oracle.energy) < 1e-9);
        let post = collapsed_posterior(&sys, &inst.y, &part).unwrap();
        assert!(rel_err_vec(&post.mean_u(sys.k_uu()), &oracle.mean_u) < 1e-8);
    }
}

#[test]
fn flat_sites_predict_the_prior() {
    let inst = regression_instance(4, 10, 3, 2);
    let sys = inst.system();
    let (state, _) = init_state(3, 10);
    let p = predict(&sys, &state, &inst.x).unwrap();
    assert_eq!(p.mean, DVector::zeros(10));
    for v in p.var.iter() {
        assert!((v - inst.h.signal_var()).abs() < 1e-14);
    }
}

#[test]
fn empty_data_gives_prior_and_zero_energy() {
    let x = DMatrix::<f64>::zeros(0, 2);
    let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    let h = pepgp::KernelHyper::new(&[1.0, 1.0], 1.0, 0.1).unwrap();
    let sys = pepgp::linalg::LowRankSystem::new(&x, &z, &h).unwrap();
    let lik = GaussianLik::new(0.1).unwrap();
    let run = run_pep(&sys, &[], &lik, &PepConfig::gaussian(0.5)).unwrap();
    assert_eq!(run.energy, 0.0);
    assert_eq!(run.state.gamma, DVector::zeros(2));
}

#[test]
fn predictive_variance_nonnegative_on_grid() {
    let inst = regression_instance(14, 40, 6, 1);
    let sys = inst.system();
    let run = gaussian_run(&inst, 1.0);
    let grid = DMatrix::from_fn(100, 1, |i, _| -5.0 + 10.0 * i as f64 / 99.0);
    let p = predict(&sys, &run.state, &grid).unwrap();
    assert!(p.var.iter().all(|v| *v >= 0.0));
}
