//! Sequential vs rayon kernels, side by side.
//!
//! The small shapes are what the default model actually hits (37-token
//! sequence at d_model 64); the larger squares show where forking starts
//! to pay. Run with `--no-default-features` to time the sequential build
//! alone.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
#[cfg(feature = "parallel")]
use pairedit::kernels::par;
use pairedit::kernels::seq;
use pairedit::rng::Rng;

fn randn(seed: u64, len: usize) -> Vec<f32> {
    let mut r = Rng::seed(seed);
    (0..len).map(|_| r.normal() as f32).collect()
}

fn configure(g: &mut criterion::BenchmarkGroup<'_, criterion::measurement::WallTime>) {
    g.warm_up_time(Duration::from_millis(300));
    g.measurement_time(Duration::from_millis(800));
    g.sample_size(20);
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_nn");
    configure(&mut g);
    for &(m, k, n) in &[(37, 64, 64), (37, 64, 256), (128, 128, 128), (256, 256, 256)] {
        let a = randn(1, m * k);
        let b = randn(2, k * n);
        let label = format!("{m}x{k}x{n}");
        g.throughput(Throughput::Elements((m * k * n) as u64));
        g.bench_function(BenchmarkId::new("seq", &label), |bch| {
            let mut out = vec![0.0f32; m * n];
            bch.iter(|| seq::matmul_nn(&a, &b, &mut out, m, k, n));
        });
        #[cfg(feature = "parallel")]
        g.bench_function(BenchmarkId::new("par", &label), |bch| {
            let mut out = vec![0.0f32; m * n];
            bch.iter(|| par::matmul_nn(&a, &b, &mut out, m, k, n));
        });
    }
    g.finish();

    let mut g = c.benchmark_group("matmul_nt");
    configure(&mut g);
    for &(m, k, n) in &[(37, 64, 37), (256, 256, 256)] {
        let a = randn(3, m * k);
        let b = randn(4, n * k);
        let label = format!("{m}x{k}x{n}");
        g.throughput(Throughput::Elements((m * k * n) as u64));
        g.bench_function(BenchmarkId::new("seq", &label), |bch| {
            let mut out = vec![0.0f32; m * n];
            bch.iter(|| seq::matmul_nt(&a, &b, &mut out, m, k, n));
        });
        #[cfg(feature = "parallel")]
        g.bench_function(BenchmarkId::new("par", &label), |bch| {
            let mut out = vec![0.0f32; m * n];
            bch.iter(|| par::matmul_nt(&a, &b, &mut out, m, k, n));
        });
    }
    g.finish();
}

fn bench_maps(c: &mut Criterion) {
    let gelu = |x: f32| {
        let c = (2.0f32 / std::f32::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    };

    let mut g = c.benchmark_group("map_gelu");
    configure(&mut g);
    for &len in &[37 * 256usize, 1 << 16, 1 << 20] {
        let src = randn(5, len);
        g.throughput(Throughput::Elements(len as u64));
        g.bench_function(BenchmarkId::new("seq", len), |bch| {
            let mut dst = vec![0.0f32; len];
            bch.iter(|| seq::map_into(&src, &mut dst, gelu));
        });
        #[cfg(feature = "parallel")]
        g.bench_function(BenchmarkId::new("par", len), |bch| {
            let mut dst = vec![0.0f32; len];
            bch.iter(|| par::map_into(&src, &mut dst, gelu));
        });
    }
    g.finish();

    // softmax-shaped row work: reduce, shift, exponentiate, normalize
    let softmax_row = |_i: usize, row: &mut [f32]| {
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    };
    let mut g = c.benchmark_group("rows_softmax");
    configure(&mut g);
    for &(rows, width) in &[(148usize, 37usize), (1024, 256)] {
        let src = randn(6, rows * width);
        g.throughput(Throughput::Elements((rows * width) as u64));
        g.bench_function(BenchmarkId::new("seq", format!("{rows}x{width}")), |bch| {
            bch.iter(|| {
                let mut data = src.clone();
                seq::for_each_row(&mut data, width, softmax_row);
                data
            });
        });
        #[cfg(feature = "parallel")]
        g.bench_function(BenchmarkId::new("par", format!("{rows}x{width}")), |bch| {
            bch.iter(|| {
                let mut data = src.clone();
                par::for_each_row(&mut data, width, softmax_row);
                data
            });
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_maps);
criterion_main!(benches);
