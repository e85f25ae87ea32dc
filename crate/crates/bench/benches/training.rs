use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use sadi_core::data::GaussianEncodeConfig;
use sadi_core::optim::Adam;
use sadi_core::train::{build_data, prepare, stack_batch, train_step};
use sadi_core::{Model, RunConfig};

fn step(c: &mut Criterion) {
    let cfg = RunConfig {
        dataset: sadi_core::config::DatasetSpec::Synthetic { n: 8 },
        ..Default::default()
    };
    let data = build_data(&cfg).unwrap();
    let enc = GaussianEncodeConfig::new(cfg.sigma_px, cfg.heatmap_size()).unwrap();
    let prepared: Vec<_> = data.train.iter().map(|s| prepare(s, &enc)).collect();
    let batch = stack_batch(&prepared.iter().collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for fusion in [false, true] {
        let cfg = RunConfig { fusion, ..cfg.clone() };
        let mut model = Model::from_run(&cfg).unwrap();
        let mut adam = Adam::default();
        let name = if fusion { "full_model_batch8" } else { "backbone_batch8" };
        group.bench_function(name, |b| {
            b.iter(|| black_box(train_step(&mut model, &mut adam, &batch, &cfg, 1e-4, 0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
