use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pfrnn::rng::RngStream;
use pfrnn::tensor::{sample_gaussian, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 320] {
        let a = sample_gaussian(&mut rng, &[n, 64]);
        let b = sample_gaussian(&mut rng, &[64, 128]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn matmul_backward(c: &mut Criterion) {
    let mut rng = RngStream::new(2);
    let a = sample_gaussian(&mut rng, &[320, 64]).into_param();
    let b = sample_gaussian(&mut rng, &[64, 128]).into_param();
    c.bench_function("matmul_backward/320", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap().sum().backward().unwrap()))
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = RngStream::new(3);
    let mut group = c.benchmark_group("conv2d");
    for n in [10usize, 20] {
        let x = sample_gaussian(&mut rng, &[3, n, n]);
        let k: Tensor = sample_gaussian(&mut rng, &[16, 3, 3, 3]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(x.conv2d(&k, 1).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, matmul_backward, conv);
criterion_main!(benches);
