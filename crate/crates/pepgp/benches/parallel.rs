//! Sequential against rayon execution for the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use pepgp::energy::{collapsed_eval, BlockPartition};
use pepgp::kernel::{gram_with, KernelHyper};
use pepgp::likelihood::ProbitLik;
use pepgp::linalg::LowRankSystem;
use pepgp::pep::{init_state, sweep, PepConfig};
use pepgp::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0))
}

fn hyper(d: usize) -> KernelHyper {
    KernelHyper::new(&vec![1.2; d], 1.0, 0.1).unwrap()
}

fn bench_gram(c: &mut Criterion) {
    let mut g = c.benchmark_group("gram");
    let h = hyper(5);
    for n in [500, 2000] {
        let x = inputs(n, 5, 1);
        let z = inputs(100, 5, 2);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| gram_with(exec, black_box(&x), black_box(&z), &h).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_collapsed(c: &mut Criterion) {
    let mut g = c.benchmark_group("collapsed_eval_grad");
    g.sample_size(20);
    let h = hyper(5);
    let n = 1000;
    let x = inputs(n, 5, 3);
    let y: Vec<f64> = (0..n).map(|i| x.row(i).sum().sin()).collect();
    let part = BlockPartition::singletons(n, 0.5).unwrap();
    for m in [50, 200] {
        let z = inputs(m, 5, 4);
        for (name, exec) in MODES {
            let sys = LowRankSystem::new_with(exec, &x, &z, &h).unwrap();
            g.bench_with_input(BenchmarkId::new(name, m), &m, |b, _| {
                b.iter(|| collapsed_eval(exec, &sys, black_box(&y), &part, true).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("probit_parallel_sweep");
    g.sample_size(20);
    let h = hyper(2);
    let n = 2000;
    let x = inputs(n, 2, 5);
    let z = inputs(50, 2, 6);
    let y: Vec<f64> = (0..n).map(|i| if x[(i, 0)] + x[(i, 1)] > 0.0 { 1.0 } else { -1.0 }).collect();
    let sys = LowRankSystem::new(&x, &z, &h).unwrap();
    let lik = ProbitLik::new(20).unwrap();
    for (name, exec) in MODES {
        let mut cfg = PepConfig::classification(0.5);
        cfg.parallel_updates = true;
        cfg.exec = exec;
        g.bench_function(name, |b| {
            b.iter(|| {
                let (mut state, mut sites) = init_state(50, n);
                sweep(&sys, &mut state, &mut sites, &y, &lik, &cfg, None).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gram, bench_collapsed, bench_sweep);
criterion_main!(benches);
