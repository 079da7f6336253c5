use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embedrank::rerank::RerankMode;
use embedrank::train::batch_triplet_grads;
use embedrank::{evaluate_method, mine_triplets, rerank_with_cab, CabConfig, Method};
use embedrank_bench::{full_size_embednet, Fixture};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("embednet_forward");
    let (model, x) = full_size_embednet();
    group.bench_function("2048-1024-512-128", |b| {
        b.iter(|| model.forward(black_box(&x)).unwrap())
    });
    let fx = Fixture::new(1, 1, 64);
    let phi = &fx.samples[0].phi;
    group.bench_function("64-64-32-16", |b| {
        b.iter(|| fx.embednet.forward(black_box(phi)).unwrap())
    });
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let fx = Fixture::new(200, 20, 64);
    let mut group = c.benchmark_group("triplet_grads");
    for n in [32, 256] {
        let batch = fx.batch(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &batch, |b, batch| {
            b.iter(|| {
                batch_triplet_grads(&fx.embednet, &fx.samples, black_box(batch), fx.margin).unwrap()
            })
        });
    }
    group.finish();
}

fn mining(c: &mut Criterion) {
    let fx = Fixture::new(200, 20, 64);
    c.bench_function("mine_triplets/200x20", |b| {
        b.iter(|| mine_triplets(black_box(&fx.samples), &fx.embednet, fx.margin, 0).unwrap())
    });
}

fn rerank(c: &mut Criterion) {
    let fx = Fixture::new(500, 20, 64);
    let cab = CabConfig::default();
    let mut group = c.benchmark_group("rerank");
    let sample = &fx.samples[0];
    group.bench_function("sample/raw", |b| {
        b.iter(|| rerank_with_cab(black_box(sample), RerankMode::Raw, 20, &cab).unwrap())
    });
    group.bench_function("sample/embednet", |b| {
        b.iter(|| {
            rerank_with_cab(
                black_box(sample),
                RerankMode::EmbedNet(&fx.embednet),
                20,
                &cab,
            )
            .unwrap()
        })
    });
    for (name, method) in [
        ("raw", Method::Raw),
        ("mlp", Method::Mlp(&fx.mlp)),
        ("embednet", Method::EmbedNet(&fx.embednet)),
    ] {
        group.bench_function(BenchmarkId::new("eval_500", name), |b| {
            b.iter(|| evaluate_method(black_box(&fx.samples), method, &cab, 20).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradients, mining, rerank);
criterion_main!(benches);
