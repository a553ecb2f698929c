use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcenter::data::{sample_triplet_batch, synth_dataset};
use semcenter::eval::{evaluate_retrieval, rank_items};
use semcenter::losses::LossConfig;
use semcenter::model::{init_params, CenterBank};
use semcenter::numerics::{l2_normalize, pairwise_sq_dist};
use semcenter::training::{backward_total, init_centers};
use semcenter::{Matrix, ModelDims, SyntheticSpec};
use std::hint::black_box;

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            l2_normalize(&v).unwrap()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = unit_rows(200, 64, &mut rng);
    let b = unit_rows(1000, 64, &mut rng);
    c.bench_function("pairwise_sq_dist 200x1000 d64", |bench| {
        bench.iter(|| pairwise_sq_dist(black_box(&a), black_box(&b)).unwrap())
    });
    let q = a.row(0).to_vec();
    c.bench_function("rank_items 1000 d64", |bench| {
        bench.iter(|| rank_items(black_box(&q), black_box(&b)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let spec = SyntheticSpec::default();
    let data = synth_dataset(&spec).unwrap();
    let ds = &data.dataset;
    let dims = ModelDims {
        feat_dim: spec.feat_dim,
        word_dim: 300,
        embed_dim: 64,
        n_classes: ds.len(),
        n_quant: 50,
        vocab_size: spec.vocab_size,
    };
    let params = init_params(&dims, 0).unwrap();
    let bank = init_centers(&params, ds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let anchors: Vec<usize> = (0..32).map(|i| i * 31).collect();
    let batch = sample_triplet_batch(ds, &anchors, &mut rng).unwrap();
    let cfg = LossConfig::default();
    c.bench_function("backward_total batch32 unquantized", |bench| {
        bench.iter(|| backward_total(&params, &bank, black_box(&batch), (0.2, 0.2), &cfg).unwrap())
    });
    let q = CenterBank::quantized(unit_rows(50, 64, &mut rng));
    c.bench_function("backward_total batch32 quantized", |bench| {
        bench.iter(|| backward_total(&params, &q, black_box(&batch), (0.2, 0.2), &cfg).unwrap())
    });
    let (_, test) = data.split_holdout(4).unwrap();
    c.bench_function("evaluate_retrieval 200 subsets", |bench| {
        bench.iter(|| evaluate_retrieval(&params, black_box(&test.dataset), &[1, 5, 10]).unwrap())
    });
}

criterion_group!(benches, distances, training_step);
criterion_main!(benches);
