use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use fedchain_core::chain::{ConfigEvent, EndorsementPolicy, Ledger, Payload};
use fedchain_core::data::{synth_gen, FeatureHasher, DEFAULT_DIMS};
use fedchain_core::federation::{fedavg, WeightedUpdate};
use fedchain_core::identity::{Registry, Role};
use fedchain_core::model::{forward, grad, DenseParams, LoraAdapter};

fn random_params(rng: &mut ChaCha8Rng, classes: usize, features: usize) -> DenseParams {
    let mut p = DenseParams::zeros(classes, features);
    p.weights.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    p
}

fn bench_fedavg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let updates: Vec<WeightedUpdate> = (0..8)
        .map(|i| WeightedUpdate {
            source: format!("org{i}"),
            params: random_params(&mut rng, 2, DEFAULT_DIMS),
            n_samples: rng.gen_range(100..1000),
        })
        .collect();
    c.bench_function("fedavg/8x2x16384", |b| b.iter(|| fedavg(black_box(&updates)).unwrap()));
}

fn bench_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hasher = FeatureHasher::new(DEFAULT_DIMS).unwrap();
    let samples = synth_gen(32, 2, 1).unwrap().samples(&hasher);
    let params = random_params(&mut rng, 2, DEFAULT_DIMS);
    let adapter = LoraAdapter::new(2, DEFAULT_DIMS, 8, 8.0, 0.0, &mut rng).unwrap();
    c.bench_function("forward/lora", |b| b.iter(|| forward(&params, Some(&adapter), black_box(&samples[0].x), None).unwrap()));
    c.bench_function("grad/batch32", |b| b.iter(|| grad(&params, None, black_box(&samples), false, None).unwrap()));
    c.bench_function("grad/lora-batch32", |b| {
        b.iter(|| grad(&params, Some(&adapter), black_box(&samples), true, None).unwrap())
    });
}

fn bench_vectorize(c: &mut Criterion) {
    let hasher = FeatureHasher::new(DEFAULT_DIMS).unwrap();
    let data = synth_gen(64, 2, 2).unwrap();
    c.bench_function("vectorize/64", |b| {
        b.iter(|| data.items.iter().map(|it| hasher.vectorize(black_box(&it.text)).nnz()).sum::<usize>())
    });
}

fn ledger_with(n: u64) -> (Registry, Ledger) {
    let mut reg = Registry::new(4, ["o1", "o2", "o3"], 3600);
    for (i, org) in ["o1", "o2", "o3"].iter().enumerate() {
        reg.register_entity(&format!("peer{i}"), Role::Client, org, 0).unwrap();
    }
    let policy = EndorsementPolicy::majority(["peer0", "peer1", "peer2"]).unwrap();
    let mut ledger = Ledger::new("bench", policy);
    for i in 0..n {
        let p = Payload::Config(ConfigEvent { key: format!("k{i}"), value: i.to_string() });
        ledger.submit(&reg, "peer0", p, i).unwrap();
    }
    (reg, ledger)
}

fn bench_chain(c: &mut Criterion) {
    let (reg, ledger) = ledger_with(100);
    c.bench_function("chain/commit", |b| {
        b.iter_batched(
            || ledger.clone(),
            |mut l| {
                let p = Payload::Config(ConfigEvent { key: "x".into(), value: "y".into() });
                l.submit(&reg, "peer1", p, 1000).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("chain/validate-100", |b| b.iter(|| black_box(&ledger).validate_chain()));
}

criterion_group!(benches, bench_fedavg, bench_model, bench_vectorize, bench_chain);
criterion_main!(benches);
