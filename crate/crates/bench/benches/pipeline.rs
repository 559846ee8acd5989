use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pgl_core::calibrate::{collect, collect_sharded, CalibrationSet};
use pgl_core::importance::score_all;
use pgl_core::model::{from_bytes, logits, random_init, to_bytes, ModelConfig};
use pgl_core::normfuse::{absorb, SiteSelection};
use pgl_core::surgery::{apply_plan, plan_from_targets, PlanTargets};
use std::hint::black_box;

fn teacher() -> pgl_core::WeightStore {
    random_init(&ModelConfig::uniform(4, 32, 4, 2, 8, 64, 64, 1e-6), 0)
}

fn forward(c: &mut Criterion) {
    let w = teacher();
    let tokens: Vec<u32> = (0..64).map(|i| (i * 7) % 64).collect();
    c.bench_function("forward 64 tokens", |b| {
        b.iter(|| logits(black_box(&w), black_box(&tokens)).unwrap())
    });
}

fn calibration(c: &mut Criterion) {
    let w = teacher();
    let calib = CalibrationSet::random(64, 8, 64, 1).unwrap();
    let mut g = c.benchmark_group("calibrate 8x64");
    g.sample_size(20);
    g.bench_function("sequential", |b| b.iter(|| collect(&w, &calib).unwrap()));
    g.bench_function("4 shards", |b| {
        b.iter(|| collect_sharded(&w, &calib, 4).unwrap())
    });
    g.finish();
}

fn surgery(c: &mut Criterion) {
    let w = teacher();
    let stats = collect(&w, &CalibrationSet::random(64, 4, 32, 2).unwrap()).unwrap();
    let scores = score_all(&stats).unwrap();
    let targets = PlanTargets {
        hidden: 24,
        heads_per_group: 1,
        groups_per_layer: None,
        ffn_dim: 48,
        remove_layers: 1,
        removal: Default::default(),
    };
    let plan = plan_from_targets(&w.config, &scores, &targets).unwrap();
    c.bench_function("apply_plan", |b| {
        b.iter(|| apply_plan(&w, &stats, &plan).unwrap())
    });
    let sites = SiteSelection::All.resolve(&w);
    c.bench_function("absorb all post-norms", |b| {
        b.iter(|| absorb(&w, &stats, &sites).unwrap())
    });
}

fn checkpoint(c: &mut Criterion) {
    let w = teacher();
    let bytes = to_bytes(&w).unwrap();
    c.bench_function("checkpoint encode", |b| {
        b.iter(|| to_bytes(black_box(&w)).unwrap())
    });
    c.bench_function("checkpoint decode", |b| {
        b.iter_batched(
            || bytes.clone(),
            |v| from_bytes(&v).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward, calibration, surgery, checkpoint);
criterion_main!(benches);
