//! Summarising a million latency samples: rayon against the sequential path.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mcaslite_bench::{summarize, summarize_sequential, BINS};
use rand::{Rng, SeedableRng};

fn samples() -> Vec<u64> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    // long right tail, like real latencies
    (0..1_000_000).map(|_| 20_000 + (rng.random::<f64>().powi(8) * 2e6) as u64).collect()
}

fn bench(c: &mut Criterion) {
    let s = samples();
    let mut g = c.benchmark_group("summarize_1m");
    g.sample_size(20);
    g.bench_function("sequential", |b| b.iter_batched(|| s.clone(), |mut v| summarize_sequential(&mut v, BINS), BatchSize::LargeInput));
    g.bench_function("parallel", |b| b.iter_batched(|| s.clone(), |mut v| summarize(&mut v, BINS), BatchSize::LargeInput));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
