//! Parallel batch APIs vs. explicit sequential iteration over the same
//! work. With default features the batch APIs fan out across cores; built
//! with `--no-default-features` they degrade to the sequential shape and
//! the two sides of each comparison converge.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use voltvar::feeder::{synthetic_feeder, SyntheticFeederOptions};
use voltvar::orpf::{self, AdmmOptions, OrpfProblem};
use voltvar::profiles::{ProfileSet, SyntheticProfileOptions};
use voltvar::sensitivity::build_sensitivity;
use voltvar::surrogate::Regime;
use voltvar::train::{self, FitHyper};

fn dispatch_problems(n: usize) -> Vec<OrpfProblem> {
    let model = synthetic_feeder(&SyntheticFeederOptions::deep(17));
    let sens = build_sensitivity(&model).unwrap();
    let profiles = ProfileSet::synthetic_daily(
        &model,
        &SyntheticProfileOptions { steps: n, seed: 23, ..Default::default() },
    );
    let boxes = model.generator_boxes();
    let (v_lo, v_hi) = model.voltage_limits();
    profiles
        .steps
        .iter()
        .map(|s| orpf::assemble(&sens, &s.p, &s.q_load, &boxes, (&v_lo, &v_hi)).unwrap())
        .collect()
}

fn bench_dispatch_batch(c: &mut Criterion) {
    let opts = AdmmOptions::default();
    let mut group = c.benchmark_group("dispatch_batch");
    for size in [16usize, 64] {
        let problems = dispatch_problems(size);
        group.bench_with_input(BenchmarkId::new("batch_api", size), &problems, |b, ps| {
            b.iter(|| black_box(orpf::solve_batch(ps, &opts)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", size), &problems, |b, ps| {
            b.iter(|| {
                let out: Vec<_> = ps.iter().map(|p| orpf::solve_with(p, &opts, None)).collect();
                black_box(out)
            })
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let model = synthetic_feeder(&SyntheticFeederOptions::deep(17));
    let sens = build_sensitivity(&model).unwrap();
    let profiles = ProfileSet::synthetic_daily(
        &model,
        &SyntheticProfileOptions { steps: 24, seed: 23, ..Default::default() },
    );
    let scenarios = train::generate_scenarios(&model, &sens, &profiles, 2, 5).unwrap();
    let built = train::build_datasets(&model, &sens, &scenarios).unwrap();
    let hyper = FitHyper {
        epochs: 60,
        hidden_size: 10,
        ..FitHyper::defaults_for(Regime::CvpSc, sens.x_norm(), 5)
    };

    let mut group = c.benchmark_group("surrogate_fit");
    group.sample_size(10);
    group.bench_function("fit_all_nodes", |b| {
        b.iter(|| black_box(train::fit(&built.datasets, Regime::CvpSc, &hyper).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_dispatch_batch, bench_fit);
criterion_main!(benches);
