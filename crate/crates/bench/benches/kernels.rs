use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hpgan_core::evaluation::{auprc, auroc};
use hpgan_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv1d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv1d");
    for k in [3, 7, 13] {
        let x = random(&[32, 16, 24], &mut rng);
        let w = random(&[32, 16, k], &mut rng);
        let b = random(&[32], &mut rng);
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                black_box(g.conv1d(x, w, b).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.input(x.clone()).unwrap();
                let w = g.input(w.clone()).unwrap();
                let b = g.input(b.clone()).unwrap();
                let y = g.conv1d(x, w, b).unwrap();
                let s = g.sum(y).unwrap();
                black_box(g.gradients(s).unwrap());
            })
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[32, 384], &mut rng);
    let w = random(&[64, 384], &mut rng);
    let b = random(&[64], &mut rng);
    c.bench_function("dense_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.input(x.clone()).unwrap();
            let w = g.input(w.clone()).unwrap();
            let b = g.input(b.clone()).unwrap();
            let y = g.dense(x, w, b).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.gradients(s).unwrap());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.2)).collect();
    c.bench_function("auroc_10k", |b| b.iter(|| auroc(black_box(&scores), &labels).unwrap()));
    c.bench_function("auprc_10k", |b| b.iter(|| auprc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, conv1d, dense, metrics);
criterion_main!(benches);
