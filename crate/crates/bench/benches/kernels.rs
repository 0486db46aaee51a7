use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relab_core::stats::{correlation, kde, t_interval, CorrelationMethod, IntervalKind};
use relab_core::tensor::gemm_nn;

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn_f32");
    for n in [64usize, 128, 256] {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 7) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 5) as f32 * 0.2).collect();
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm_nn(black_box(&a), black_box(&b), &mut out, n, n, n))
        });
    }
    group.finish();
}

fn stats(c: &mut Criterion) {
    let xs: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| x + (i % 3) as f64 * 0.05)
        .collect();
    c.bench_function("spearman_500", |b| {
        b.iter(|| correlation(black_box(&xs), black_box(&ys), CorrelationMethod::Spearman).unwrap())
    });
    c.bench_function("t_interval_500", |b| {
        b.iter(|| t_interval(black_box(&xs), IntervalKind::T95).unwrap())
    });
    c.bench_function("kde_500x200", |b| b.iter(|| kde(black_box(&xs), 200).unwrap()));
}

criterion_group!(benches, gemm, stats);
criterion_main!(benches);
