use aesthete::attention::{attention_stats, AttentionMap};
use aesthete::losses::{alignment_loss, emd_raw, tensor, AlignmentConfig};
use aesthete::metrics::{metrics_report, EvalPair};
use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::hint::black_box;

fn simplex(rng: &mut StdRng, d: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn losses(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(0);
    let p = simplex(&mut rng, 10);
    let q = simplex(&mut rng, 10);
    c.bench_function("emd_raw d=10", |b| b.iter(|| emd_raw(black_box(&p), black_box(&q), 2.0)));

    let x: Vec<f64> = (0..512).map(|_| rng.random::<f64>() - 0.5).collect();
    let y: Vec<f64> = (0..512).map(|_| rng.random::<f64>() - 0.5).collect();
    let cfg = AlignmentConfig::default();
    c.bench_function("alignment d=512", |b| b.iter(|| alignment_loss(black_box(&x), black_box(&y), &cfg).unwrap()));

    let mut group = c.benchmark_group("emd_tensor");
    for batch in [16usize, 128] {
        let rows = |rng: &mut StdRng| {
            let flat: Vec<f64> = (0..batch).flat_map(|_| simplex(rng, 10)).collect();
            Tensor::from_vec(flat, (batch, 10), &Device::Cpu).unwrap()
        };
        let (tp, tq) = (rows(&mut rng), rows(&mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |b, _| {
            b.iter(|| tensor::emd(&tp, &tq, 2.0).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let mut group = c.benchmark_group("metrics_report");
    for n in [1_000usize, 20_000] {
        let pairs: Vec<EvalPair> = (0..n)
            .map(|_| {
                let t = 1.0 + 9.0 * rng.random::<f64>();
                EvalPair::new(t + rng.random::<f64>() - 0.5, t)
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &pairs, |b, pairs| {
            b.iter(|| metrics_report(pairs).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let (heads, grid) = (3, (14, 14));
    let n = grid.0 * grid.1 + 1;
    let maps: Vec<Vec<AttentionMap>> = (0..4)
        .map(|_| {
            (0..2)
                .map(|_| {
                    let w: Vec<f64> = (0..heads * n).flat_map(|_| simplex(&mut rng, n)).collect();
                    AttentionMap::new(w, heads, grid, true).unwrap()
                })
                .collect()
        })
        .collect();
    c.bench_function("attention_stats 4x2 layers 14x14", |b| b.iter(|| attention_stats(black_box(&maps)).unwrap()));
}

criterion_group!(benches, losses, metrics, attention);
criterion_main!(benches);
