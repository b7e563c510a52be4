//! Sequential vs rayon-parallel execution of the data-parallel hot paths.
//! Build without default features to bench the sequential-only binary.

use advseg_core::attacks::{self, AttackSpec};
use advseg_core::data::{self, SceneSpec};
use advseg_core::exec::Execution;
use advseg_core::nn::{Architecture, ModelConfig, SegModel};
use advseg_core::train;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Execution::Parallel));
    m
}

fn model() -> SegModel {
    let mut cfg = ModelConfig::new(Architecture::UNet);
    cfg.base_channels = 8;
    SegModel::new(&cfg).unwrap()
}

fn bench(c: &mut Criterion) {
    let spec = SceneSpec::forest(1).with_size(64);
    let d = data::generate_dataset(&spec, 16, Execution::Sequential).unwrap();
    let m = model();
    let pgd = AttackSpec {
        steps: 3,
        ..AttackSpec::pgd_linf()
    };

    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| data::generate_dataset(black_box(&spec), 32, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train::evaluate(&m, black_box(&d), None, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("pgd_batch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| attacks::pgd(&m, black_box(&d.images[..8]), &d.masks[..8], &pgd, 0, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
