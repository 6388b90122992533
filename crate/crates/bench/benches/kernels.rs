use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fam_bench::desk_model;
use fam_core::numerics::{matmul, Tensor};
use fam_core::tasks::{gen_passkey, FillerKind, ToyVocab};
use fam_core::training::{train_step, Adam, SavedFamStore, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 256] {
        let a = Tensor::<f32>::full(&[n, n], 0.5);
        let b = Tensor::<f32>::full(&[n, n], 0.25);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_layer_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_block");
    for fam in [0usize, 4] {
        let model = desk_model(fam);
        let input = Tensor::<f32>::full(&[16, 64], 0.1);
        let positions: Vec<i64> = (16..32).collect();
        // State after one block: seeded FAM and one cached block.
        let mut session = model.stream();
        session.feed_block(&[ToyVocab::new().filler(); 16]).unwrap();
        let state = session.layers()[0].clone();
        group.bench_with_input(BenchmarkId::new("fam", fam), &fam, |bench, _| {
            bench.iter(|| {
                let mut state = state.clone();
                model.layer_forward(0, black_box(&input), &mut state, &positions, 0.0).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_stream_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("stream_block");
    let block = vec![ToyVocab::new().filler(); 16];
    for fam in [0usize, 4] {
        let model = desk_model(fam);
        let mut session = model.stream();
        // Fill the window so every measured block sees a full memory.
        for _ in 0..4 {
            session.feed_block(&block).unwrap();
        }
        group.bench_with_input(BenchmarkId::new("fam", fam), &fam, |bench, _| {
            bench.iter(|| session.feed_block(black_box(&block)).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    let vocab = ToyVocab::new();
    for filler in [48usize, 512] {
        let mut model = desk_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let example = gen_passkey(&vocab, filler, 3, FillerKind::Repeated, &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(cfg.learning_rate);
        let mut store = SavedFamStore::new();
        group.bench_with_input(BenchmarkId::new("filler", filler), &filler, |bench, _| {
            bench.iter(|| train_step(&mut model, std::slice::from_ref(&example), &mut store, &cfg, &mut opt, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_layer_block, bench_stream_step, bench_train_step);
criterion_main!(benches);
