use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use pwa_mrac::certificate::solve_lyapunov;
use pwa_mrac::hybrid_integrator::closed_loop_derivative;
use pwa_mrac::pwa_model::companion;
use pwa_mrac::scenario::run;
use pwa_mrac::{ClosedLoopState, GainState};
use pwa_mrac_bench::fixture;
use std::hint::black_box;

fn lyapunov(c: &mut Criterion) {
    let a = companion(&[-24.0, -50.0, -35.0, -10.0]);
    let q = DMatrix::identity(4, 4);
    c.bench_function("solve_lyapunov n=4", |b| b.iter(|| solve_lyapunov(black_box(&a), &q).unwrap()));
}

fn derivative(c: &mut Criterion) {
    let s = fixture("three_region");
    let gains = GainState::new(2, s.plant.mode_count(), s.reference.mode_count(), 0, 0);
    let state = ClosedLoopState {
        t: 1.0,
        x: vec![0.1, -0.2],
        x_hat: vec![0.3, 0.1],
        gains,
    };
    c.bench_function("closed_loop_derivative three_region", |b| {
        b.iter(|| closed_loop_derivative(s.closed_loop(), black_box(&state)).unwrap())
    });
}

fn full_runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    for name in ["bimodal_affine", "sliding"] {
        let s = fixture(name);
        g.bench_function(name, |b| b.iter(|| run(black_box(&s)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, lyapunov, derivative, full_runs);
criterion_main!(benches);
