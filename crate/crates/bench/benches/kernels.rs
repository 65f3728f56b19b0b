use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use slora::rng::{gaussian_matrix, stream};
use slora::train::attach_adapters;
use slora::{
    adapter_forward, init_slice_adapter, make_task_pair, param_space_delta, pretrain, svd, Activation, DenseMatrix,
    ModelSpec, SliceSpec, SweepConfig, TaskPairConfig,
};

fn sample(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    gaussian_matrix(&mut stream(seed, 0, 0), rows, cols, 1.0)
}

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    for n in [32, 64, 128] {
        let w = sample(n, n, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &w, |b, w| b.iter(|| svd(black_box(w)).unwrap()));
    }
    g.finish();
}

fn bench_adapter_forward(c: &mut Criterion) {
    let w = sample(64, 64, 1);
    let st = init_slice_adapter(&w, SliceSpec::new(24, 8)).unwrap();
    let x = sample(50, 64, 2);
    c.bench_function("adapter_forward/50x64 r8", |b| {
        b.iter(|| adapter_forward(black_box(&x), black_box(&st)).unwrap())
    });
}

fn bench_param_space_delta(c: &mut Criterion) {
    let w0 = sample(64, 64, 3);
    let w1 = w0.add(&sample(64, 64, 4).scale(0.01)).unwrap();
    c.bench_function("param_space_delta/64x64", |b| {
        b.iter(|| param_space_delta(black_box(&w0), black_box(&w1)).unwrap())
    });
}

fn bench_training_epoch(c: &mut Criterion) {
    let desk = SweepConfig::desk_scale();
    let pair = make_task_pair(&TaskPairConfig {
        input_dim: 64,
        classes_a: 4,
        classes_b: 4,
        n_train: 1000,
        n_test: 100,
        overlap: 0.5,
        noise_std: 0.0,
        seed: 0,
        teacher_hidden: 8,
        share_readout: false,
    })
    .unwrap();
    let spec = ModelSpec::new(vec![64, 64, 64, 8], Activation::Identity).with_adapted([0, 1]);
    let mut cfg = desk.finetune_cfg.clone();
    cfg.epochs = 1;
    let base = pretrain(&spec, &pair.a.train, None, &cfg).unwrap();
    let adapted = attach_adapters(base.clone(), SliceSpec::new(24, 8)).unwrap();
    let mut g = c.benchmark_group("training_epoch");
    g.sample_size(10);
    g.bench_function("full/1000 rows", |b| {
        b.iter(|| pretrain(&spec, black_box(&pair.a.train), None, &cfg).unwrap())
    });
    g.bench_function("adapters/1000 rows", |b| {
        b.iter(|| slora::train::finetune(adapted.clone(), black_box(&pair.a.train), &[], &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_svd, bench_adapter_forward, bench_param_space_delta, bench_training_epoch);
criterion_main!(benches);
