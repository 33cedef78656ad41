use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wps_core::{
    bl_distance, fluid_step, run, solve_direct, ArrivalModel, AtomicMeasure, Distribution,
    FluidConfig, Job, SimConfig, SystemParameters, WeightFunction,
};

const W: WeightFunction = WeightFunction::ExpSaturation { rate: 1.0 };

fn params() -> SystemParameters {
    SystemParameters::new(
        ArrivalModel::poisson(1.0).unwrap(),
        Distribution::Exponential { mean: 1.0 },
        W,
    )
    .unwrap()
}

fn spread(n: usize, shift: f64) -> AtomicMeasure {
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (shift + 5.0 * i as f64 / n as f64, 1.0 / n as f64))
        .collect();
    AtomicMeasure::from_pairs(&pairs).unwrap()
}

fn bench_distance(c: &mut Criterion) {
    let mut group = c.benchmark_group("bl_distance");
    for n in [10, 100, 1000, 10000] {
        let (a, b) = (spread(n, 0.0), spread(n, 0.013));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| bl_distance(black_box(&a), black_box(&b)))
        });
    }
    group.finish();
}

fn bench_fluid(c: &mut Criterion) {
    let p = params();
    let theta = spread(2, 0.5);
    let cfg = FluidConfig::new(0.01, 200, 1.0, &theta, &W);
    let mid = solve_direct(
        &theta,
        &p,
        &FluidConfig {
            horizon: 0.5,
            ..cfg.clone()
        },
    )
    .unwrap()
    .measures()
    .last()
    .unwrap()
    .clone();
    c.bench_function("fluid_step", |b| {
        b.iter(|| fluid_step(black_box(&mid), &p, &cfg))
    });
    c.bench_function("solve_direct_unit_horizon", |b| {
        b.iter(|| solve_direct(black_box(&theta), &p, &cfg))
    });
}

fn bench_simulator(c: &mut Criterion) {
    let p = params();
    let cfg = SimConfig {
        horizon: 50.0,
        seed: 1,
        ..SimConfig::default()
    };
    let init: Vec<Job> = (0..10)
        .map(|i| Job::initial(i, 0.5 + i as f64 * 0.2))
        .collect();
    c.bench_function("simulate_horizon_50", |b| {
        b.iter(|| run(&p, black_box(init.clone()), &cfg))
    });
}

criterion_group!(benches, bench_distance, bench_fluid, bench_simulator);
criterion_main!(benches);
