//! Parallel vs sequential kernel comparison.
//!
//! The `parallel` entry points dispatch to rayon above a size threshold; the
//! `seq` module is the always-sequential fallback that the non-default build
//! uses everywhere. Both produce identical bits, so this suite only measures
//! time.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nt_core::kernels;
use nt_core::rng::{normal_tensor, stream};
use nt_core::tensor::Tensor;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nn");
    for &n in &[64usize, 128, 256] {
        let mut rng = stream(9, "bench");
        let a: Tensor<f32> = normal_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let b: Tensor<f32> = normal_tensor(&mut rng, &[n, n], 0.0, 1.0);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| kernels::matmul_nn(a.data(), b.data(), n, n, n));
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| kernels::seq::matmul_nn(a.data(), b.data(), n, n, n));
        });
    }
    group.finish();
}

fn bench_matmul_nt(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nt");
    for &n in &[64usize, 256] {
        let mut rng = stream(10, "bench");
        let a: Tensor<f32> = normal_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let b: Tensor<f32> = normal_tensor(&mut rng, &[n, n], 0.0, 1.0);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| kernels::matmul_nt(a.data(), b.data(), n, n, n));
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| kernels::seq::matmul_nt(a.data(), b.data(), n, n, n));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_matmul_nt);
criterion_main!(benches);
