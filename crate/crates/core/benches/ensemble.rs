//! Member-parallel kernels on one thread versus the whole pool.
//!
//! A one-thread pool takes the inline path, which is the same code the
//! sequential build (`--no-default-features`) runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ensemble_oc::gradient::assemble_gradient;
use ensemble_oc::integrator::{integrate_adjoint, integrate_forward};
use ensemble_oc::optim::{run, Method, OptimizerConfig};
use ensemble_oc::problem::{LinearEnsemble, Logistic1d};
use ensemble_oc::{Beta44Law, PiecewiseControl, TimeGrid};
use rayon::ThreadPool;

fn pools() -> Vec<(String, ThreadPool)> {
    // At least two threads so the pool path is measured on one-core hosts too.
    let all = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    [1, all]
        .into_iter()
        .map(|t| (format!("{t}-thread"), rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap()))
        .collect()
}

fn kernels(c: &mut Criterion) {
    let linear = LinearEnsemble::linear2d([-1.0, -1.0]);
    let logistic = Logistic1d::default();
    let measure = Beta44Law.sample_empirical(300, 20240601).unwrap();
    let grid = TimeGrid::new(64, 4).unwrap();
    let u2 = PiecewiseControl::constant(grid, &[-0.5, 0.25]);
    let u1 = PiecewiseControl::constant(grid, &[0.2]);
    let one_step = OptimizerConfig { max_iter: 1, ..OptimizerConfig::default() };

    let mut g = c.benchmark_group("forward");
    for (name, pool) in &pools() {
        g.bench_function(BenchmarkId::new("linear2d", name), |b| {
            pool.install(|| b.iter(|| integrate_forward(&linear, &measure, black_box(&u2)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("logistic1d", name), |b| {
            pool.install(|| b.iter(|| integrate_forward(&logistic, &measure, black_box(&u1)).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("gradient");
    for (name, pool) in &pools() {
        g.bench_function(BenchmarkId::new("logistic1d", name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let traj = integrate_forward(&logistic, &measure, black_box(&u1)).unwrap();
                    let adj = integrate_adjoint(&logistic, &measure, &u1, &traj).unwrap();
                    assemble_gradient(&logistic, &measure, &u1, 1e-3, &traj, &adj).unwrap()
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("iteration");
    for (name, pool) in &pools() {
        for method in [Method::Gradient, Method::Pmp] {
            g.bench_function(BenchmarkId::new(method.to_string(), name), |b| {
                pool.install(|| b.iter(|| run(method, &linear, &measure, black_box(&u2), 1e-3, &one_step).unwrap()))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
