use cca_core::cca::{cca_forward, CcaConfig, CcaParams};
use cca_core::conv::{conv2d, conv2d_direct, ConvSpec};
use cca_core::matrix::{Linear, Matrix};
use cca_core::transformer::{multi_head_attention, Attention};
use cca_core::Tensor;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d 16→16 3×3 on 32×32");
    for rate in [1, 2, 3] {
        let spec = ConvSpec::<f32>::new(16, 16, 3, 1, rate, rate).with_uniform(&mut rng);
        let x = Tensor::<f32>::uniform([1, 16, 32, 32], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("im2col", rate), &rate, |b, _| {
            b.iter(|| conv2d(black_box(&x), &spec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("direct", rate), &rate, |b, _| {
            b.iter(|| conv2d_direct(black_box(&x), &spec).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let width = 32;
    let attn = Attention::<f32> {
        query: Linear::uniform(width, width, &mut rng),
        key: Linear::uniform(width, width, &mut rng),
        value: Linear::uniform(width, width, &mut rng),
        output: Linear::uniform(width, width, &mut rng),
    };
    let mut group = c.benchmark_group("multi_head_attention width 32, 4 heads");
    for tokens in [68, 260] {
        let x = Matrix::<f32>::uniform(tokens, width, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &tokens, |b, _| {
            b.iter(|| multi_head_attention(black_box(&x), &attn, 4).unwrap())
        });
    }
    group.finish();
}

fn block(c: &mut Criterion) {
    let mut group = c.benchmark_group("cca_forward default config");
    for size in [16, 32] {
        let config = CcaConfig::default();
        let params = CcaParams::<f32>::init(&config, 0).unwrap();
        let x = Tensor::<f32>::uniform([1, config.c_in, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| cca_forward(black_box(&x), &params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, attention, block);
criterion_main!(benches);
