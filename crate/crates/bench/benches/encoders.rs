use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtok_core::encoders::VARIANT_TAGS;
use vidtok_core::{Encoder, EncoderConfig, ParamStore, TokenGrid};

fn grid(frames: usize, tokens: usize, dim: usize) -> TokenGrid {
    TokenGrid::from_fn(frames, tokens, dim, |i| ((i * 7919) % 1013) as f64 / 1013.0 - 0.5).unwrap()
}

fn encode_desk(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_desk");
    let g = grid(8, 16, 64);
    for tag in VARIANT_TAGS {
        let cfg = EncoderConfig::for_tag(tag, 8, 16, 64, 8).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        group.bench_function(tag, |b| b.iter(|| enc.encode(&store, &g).unwrap()));
    }
    group.finish();
}

// The memory fold dominates, so the budget should barely move these.
fn grouped_budget(c: &mut Criterion) {
    let mut group = c.benchmark_group("grouped_ttm_budget");
    group.sample_size(20);
    let g = grid(8, 16, 64);
    for m in [16, 32, 128] {
        let cfg = EncoderConfig::for_tag("grouped_ttm", 8, 16, 64, m).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| enc.encode(&store, &g).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, encode_desk, grouped_budget);
criterion_main!(benches);
