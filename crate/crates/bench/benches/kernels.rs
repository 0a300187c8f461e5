use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use efa_bench::{pattern, toy_model};
use efa_core::tensor::{conv2d, pool2d, PoolMode};
use efa_core::ConvSpec;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(ch, hw) in &[(32, 40), (64, 20)] {
        let x = pattern([1, ch, hw, hw]);
        let dense = pattern([ch, ch, 3, 3]);
        let depthwise = pattern([ch, 1, 3, 3]);
        let id = format!("{ch}x{hw}x{hw}");
        g.bench_with_input(BenchmarkId::new("dense3x3", &id), &x, |b, x| {
            b.iter(|| conv2d(black_box(x), &dense, None, &ConvSpec::same(3, 1)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("depthwise3x3", &id), &x, |b, x| {
            b.iter(|| conv2d(black_box(x), &depthwise, None, &ConvSpec::same(3, 1).with_groups(ch)).unwrap())
        });
    }
    g.finish();
}

fn pool(c: &mut Criterion) {
    let x = pattern([1, 128, 20, 20]);
    c.bench_function("maxpool5x5/128x20x20", |b| {
        b.iter(|| pool2d(black_box(&x), PoolMode::Max, &ConvSpec::new(5, 1, 2)).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let (model, x) = toy_model(128);
    c.bench_function("forward/toy128", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
}

criterion_group!(benches, conv, pool, forward);
criterion_main!(benches);
