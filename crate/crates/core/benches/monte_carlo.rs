use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use robust_sysid::bench::{generate_trial, run_monte_carlo, BenchConfig, Method};
use robust_sysid::em::{run_em, EmOptions};
use robust_sysid::NoiseModel;

fn config(jobs: Option<usize>) -> BenchConfig {
    BenchConfig {
        runs: 8,
        samples: 200,
        n: 50,
        order: 30,
        methods: vec![Method::EmS, Method::EmL, Method::SsMl],
        seed: 1,
        jobs,
        ..BenchConfig::default()
    }
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("monte_carlo_8_runs");
    group.sample_size(10);
    for (label, jobs) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, jobs| {
            b.iter(|| run_monte_carlo(black_box(&config(*jobs))).unwrap())
        });
    }
    group.finish();
}

fn single_identification(c: &mut Criterion) {
    let trial = generate_trial(&config(Some(1)), 0).unwrap();
    let model = NoiseModel::laplacian(trial.sigma2).unwrap();
    let mut group = c.benchmark_group("em_l_n200");
    group.sample_size(10);
    group.bench_function("run_em", |b| {
        b.iter(|| run_em(black_box(&trial.dataset), 50, &model, &EmOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, monte_carlo, single_identification);
criterion_main!(benches);
