//! Micro-benchmarks of the training hot path: bilinear map sampling,
//! Hungarian matching, and a fusion-layer forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rand::Rng;
use std::hint::black_box;

use dualview_core::autodiff::{bilinear_sample, ParamStore, Tensor};
use dualview_core::config::ModelConfig;
use dualview_core::fusion::FusionLayer;
use dualview_core::losses::hungarian_match;
use dualview_core::rng::seeded_rng;

fn bench_bilinear(c: &mut Criterion) {
    let mut rng = seeded_rng(1);
    let map = Tensor::new(
        Array3::<f32>::from_shape_fn((32, 64, 64), |_| rng.random_range(-1.0..1.0)).into_dyn(),
    );
    let points = Tensor::new(
        Array2::<f32>::from_shape_fn((1024, 2), |_| rng.random_range(0.0..1.0)).into_dyn(),
    );
    c.bench_function("bilinear_sample 32ch 64x64 map, 1024 points", |b| {
        b.iter(|| bilinear_sample(black_box(&map), black_box(&points)))
    });
}

fn bench_hungarian(c: &mut Criterion) {
    let mut rng = seeded_rng(2);
    let cost = Array2::<f64>::from_shape_fn((100, 8), |_| rng.random_range(0.0..10.0));
    c.bench_function("hungarian_match 100 queries x 8 gts", |b| {
        b.iter(|| hungarian_match(black_box(&cost)).unwrap())
    });
}

fn bench_fusion_layer(c: &mut Criterion) {
    let cfg = ModelConfig {
        embed_dim: 32,
        num_heads: 4,
        fusion_downsample: 2,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let layer = FusionLayer::new(&mut store, 3, "bench.fuse", &cfg);
    let mut rng = seeded_rng(4);
    let main = Tensor::new(
        Array3::<f32>::from_shape_fn((32, 16, 16), |_| rng.random_range(-1.0..1.0)).into_dyn(),
    );
    let reference = Tensor::new(
        Array3::<f32>::from_shape_fn((32, 16, 16), |_| rng.random_range(-1.0..1.0)).into_dyn(),
    );
    c.bench_function("fusion_layer forward 32ch 16x16", |b| {
        b.iter(|| layer.forward(black_box(&main), black_box(&reference)).unwrap())
    });
}

criterion_group!(benches, bench_bilinear, bench_hungarian, bench_fusion_layer);
criterion_main!(benches);
