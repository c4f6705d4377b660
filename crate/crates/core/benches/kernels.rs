//! Sequential versus data-parallel execution of the hot kernels.
//!
//! Each group runs the same work on a one-thread pool and on a pool sized to
//! the machine. Built with `--no-default-features`, both arms are sequential.

use std::thread::available_parallelism;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scattnet::attention::HiddenActivation;
use scattnet::infer::predict_tiled;
use scattnet::model::{AttentionMode, Model, ModelConfig};
use scattnet::ops::{self, Padding};
use scattnet::{par, Tensor};

fn arms() -> [(&'static str, usize); 2] {
    let all = available_parallelism().map_or(1, |n| n.get());
    [("sequential", 1), ("parallel", all)]
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn model() -> Model {
    Model::build(ModelConfig {
        in_channels: 3,
        num_classes: 6,
        encoder_widths: vec![16, 32, 64],
        attention: AttentionMode::Cascade,
        hidden_activation: HiddenActivation::Relu,
        seed: 1,
    })
    .expect("model")
}

fn conv2d(c: &mut Criterion) {
    let input = uniform(&[4, 32, 64, 64], 1);
    let kernel = uniform(&[32, 32, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d_4x32x64x64_k3");
    for (name, threads) in arms() {
        let pool = par::Pool::new(threads);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| ops::conv2d(black_box(&input), &kernel, None, 1, Padding::Same))
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let m = model();
    let x = uniform(&[2, 3, 128, 128], 3);
    let mut group = c.benchmark_group("model_forward_2x3x128x128");
    for (name, threads) in arms() {
        let pool = par::Pool::new(threads);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| m.forward(black_box(&x))))
        });
    }
    group.finish();
}

fn tiled(c: &mut Criterion) {
    let m = model();
    let img = uniform(&[3, 300, 300], 4).map(|v| v.abs());
    let mut group = c.benchmark_group("predict_tiled_300x300_w128");
    group.sample_size(10);
    for (name, threads) in arms() {
        let pool = par::Pool::new(threads);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| predict_tiled(&m, black_box(&img), 128)))
        });
    }
    group.finish();
}

criterion_group!(benches, conv2d, forward, tiled);
criterion_main!(benches);
