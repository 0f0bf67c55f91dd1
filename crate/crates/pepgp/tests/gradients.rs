//! Analytic gradients against central finite differences.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pepgp::energy::{exact_gp_logml_grad, BlockPartition};
use pepgp::kernel::{gram, gram_grads, KernelHyper};
use pepgp::likelihood::{Likelihood, ProbitLik};
use pepgp::linalg::LowRankSystem;
use pepgp::pep::{run_pep, PepConfig};
use pepgp::training::{classification_energy_grads, grad_check, regression_objective_grads, TrainableParams};
use pepgp::Exec;

const STEP: f64 = 1e-5;

fn regression_check(inst: &Instance, part: &BlockPartition) -> f64 {
    let p0 = TrainableParams::new(inst.h.clone(), inst.z.clone()).unwrap();
    let f = |v: &DVector<f64>| {
        let p = p0.with_vec(v)?;
        regression_objective_grads(&p, &inst.x, &inst.y, part)
    };
    let report = grad_check(f, &p0.to_vec(), STEP, 1e-5).unwrap();
    assert!(report.passed(), "failing coordinates {:?}, worst {}", report.failing, report.worst_rel);
    report.worst_rel
}

#[test]
fn regression_gradients_all_powers() {
    for seed in 0..8 {
        let (n, m) = random_sizes(seed + 300, 40, 5);
        let inst = regression_instance(seed + 300, n, m, 2);
        for alpha in [0.0, 1e-3, 0.5, 1.0] {
            regression_check(&inst, &BlockPartition::singletons(n, alpha).unwrap());
        }
    }
}

#[test]
fn regression_gradients_blocks() {
    for seed in 0..4 {
        let inst = regression_instance(seed + 400, 24, 6, 2);
        for alpha in [0.3, 1.0] {
            regression_check(&inst, &BlockPartition::contiguous(24, 4, alpha).unwrap());
        }
    }
}

#[test]
fn pseudo_input_gradient_when_z_equals_x() {
    let mut inst = regression_instance(500, 6, 1, 2);
    inst.z = inst.x.clone();
    for alpha in [0.0, 0.5, 1.0] {
        regression_check(&inst, &BlockPartition::singletons(6, alpha).unwrap());
    }
}

#[test]
fn duplicate_pseudo_inputs_stay_finite() {
    let mut inst = regression_instance(501, 20, 4, 2);
    let row = inst.z.row(0).clone_owned();
    inst.z.row_mut(1).copy_from(&row);
    let p = TrainableParams::new(inst.h.clone(), inst.z.clone()).unwrap();
    let (f, g) =
        regression_objective_grads(&p, &inst.x, &inst.y, &BlockPartition::singletons(20, 0.5).unwrap()).unwrap();
    assert!(f.is_finite() && g.iter().all(|v| v.is_finite()));
}

#[test]
fn exact_gp_gradient() {
    let inst = regression_instance(502, 25, 1, 3);
    let f = |v: &DVector<f64>| {
        let h = KernelHyper::from_slice(v.as_slice())?;
        exact_gp_logml_grad(&inst.x, &inst.y, &h)
    };
    let report = grad_check(f, &DVector::from_vec(inst.h.to_vec()), STEP, 1e-5).unwrap();
    assert!(report.passed(), "{:?}", report.failing);
}

#[test]
fn gram_grads_match_finite_differences() {
    let mut r = rng(503);
    for _ in 0..5 {
        let x1 = DMatrix::from_fn(3, 2, |_, _| rand::Rng::random_range(&mut r, -2.0..2.0));
        let x2 = DMatrix::from_fn(4, 2, |_, _| rand::Rng::random_range(&mut r, -2.0..2.0));
        let h = KernelHyper::new(&[0.8, 1.4], 1.3, 0.1).unwrap();
        let g = gram_grads(&x1, &x2, &h, true).unwrap();
        let base = h.to_vec();
        for (k, dk) in g.hyper.iter().enumerate() {
            let mut hp = base.clone();
            let mut hm = base.clone();
            hp[k] += STEP;
            hm[k] -= STEP;
            let fd = (gram(&x1, &x2, &KernelHyper::from_slice(&hp).unwrap()).unwrap()
                - gram(&x1, &x2, &KernelHyper::from_slice(&hm).unwrap()).unwrap())
                / (2.0 * STEP);
            assert!(rel_err(dk, &fd) < 1e-6, "hyper {k}");
        }
        for (k, dk) in g.inputs.unwrap().iter().enumerate() {
            let (i, d) = (k / 2, k % 2);
            let mut xp = x1.clone();
            let mut xm = x1.clone();
            xp[(i, d)] += STEP;
            xm[(i, d)] -= STEP;
            let fd = (gram(&xp, &x2, &h).unwrap() - gram(&xm, &x2, &h).unwrap()) / (2.0 * STEP);
            assert!(rel_err(dk, &fd) < 1e-6, "input {k}");
        }
    }
}

fn classification_check(seed: u64, alpha: f64, batch: Option<Vec<usize>>) -> f64 {
    let inst = classification_instance(seed, 30, 5);
    let lik = ProbitLik::new(60).unwrap();
    let sys = inst.system();
    let mut cfg = PepConfig::classification(alpha);
    cfg.max_sweeps = 20;
    let sites = run_pep(&sys, &inst.y, &lik, &cfg).unwrap().sites;
    let p0 = TrainableParams::new(inst.h.clone(), inst.z.clone()).unwrap();
    let lik: &dyn Likelihood = &lik;
    let f = |v: &DVector<f64>| {
        let p = p0.with_vec(v)?;
        let s = LowRankSystem::new(&inst.x, &p.z, &p.hyper)?;
        let (e, g, skipped) = classification_energy_grads(Exec::Sequential, &s, &sites, &inst.y, lik, alpha, batch.as_deref())?;
        assert_eq!(skipped, 0);
        Ok((-e, -g))
    };
    let report = grad_check(f, &p0.to_vec(), STEP, 1e-4).unwrap();
    assert!(report.passed(), "seed {seed} alpha {alpha}: {:?} worst {}", report.failing, report.worst_rel);
    report.worst_rel
}

#[test]
fn classification_gradients() {
    for seed in 0..5 {
        for alpha in [0.01, 0.5, 1.0] {
            classification_check(seed + 600, alpha, None);
        }
    }
}

#[test]
fn classification_minibatch_gradient() {
    classification_check(700, 0.5, Some(vec![1, 4, 9, 17, 22]));
}
