use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grove_core::accounting::gaussian_tokens;
use grove_core::{
    grove_backward, grove_forward_dedup, grove_forward_naive, GroveConfig, GroveLayer, Vector,
};
use std::hint::black_box;

fn tokens(d: usize) -> Vec<Vector> {
    gaussian_tokens(d, 0).take(64).collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for g in [64, 16] {
        let layer = GroveLayer::random(GroveConfig {
            g,
            ..GroveConfig::default()
        })
        .unwrap();
        let xs = tokens(layer.config.d);
        group.bench_with_input(BenchmarkId::new("dedup", g), &xs, |b, xs| {
            b.iter(|| {
                for x in xs {
                    black_box(grove_forward_dedup(&layer, x).unwrap());
                }
            })
        });
        group.bench_with_input(BenchmarkId::new("naive", g), &xs, |b, xs| {
            b.iter(|| {
                for x in xs {
                    black_box(grove_forward_naive(&layer, x).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let layer = GroveLayer::random(GroveConfig::default()).unwrap();
    let xs = tokens(layer.config.d);
    let upstream = Vector::filled(layer.config.d, 1.0);
    let decisions: Vec<_> = xs.iter().map(|x| layer.route(x).unwrap()).collect();
    c.bench_function("backward/64", |b| {
        b.iter(|| {
            for (x, d) in xs.iter().zip(&decisions) {
                black_box(grove_backward(&layer, x, d, &upstream).unwrap());
            }
        })
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
