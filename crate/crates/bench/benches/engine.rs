use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mtal_bench::landmark_fixture;
use mtal_core::adversary::LabelSubset;
use mtal_core::diffcore::Sgd;
use mtal_core::metrics::js_divergence;
use mtal_core::trainer::{update_discriminator_step, update_recognizer_step};
use mtal_core::{LossWeights, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t =
        |r: usize, k: usize| Tensor::matrix(r, k, (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (x, w, b) = (
        t(64, 128),
        t(128, 128).into_param(),
        Tensor::zeros(vec![128]).into_param(),
    );
    c.bench_function("linear_forward_backward_64x128x128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let wv = tape.leaf(&w);
            let bv = tape.leaf(&b);
            let y = tape.linear(xv, wv, bv).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        })
    });
}

fn train_steps(c: &mut Criterion) {
    let (data, rec, disc) = landmark_fixture(512);
    let idx: Vec<usize> = (0..64).collect();
    let feats = data.features(&idx).unwrap();
    let labels = data.labels(&idx).unwrap();
    let weights = LossWeights::default();
    c.bench_function("recognizer_step_batch64", |bench| {
        bench.iter_batched(
            || (rec.clone(), Sgd::new(0.05, 0.0)),
            |(mut r, mut opt)| {
                update_recognizer_step(&mut r, &disc, &feats, &labels, &weights, LabelSubset::All, &mut opt).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("discriminator_step_batch64", |bench| {
        bench.iter_batched(
            || (disc.clone(), Sgd::new(0.01, 0.0)),
            |(mut d, mut opt)| {
                update_discriminator_step(&rec, &mut d, &feats, &labels, LabelSubset::All, &mut opt).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn divergence(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<Vec<u32>> = (0..1000)
        .map(|_| (0..16).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let b: Vec<Vec<u32>> = (0..1000)
        .map(|_| (0..16).map(|_| rng.random_range(0..4)).collect())
        .collect();
    c.bench_function("js_divergence_1000x16", |bench| {
        bench.iter(|| js_divergence(&a, &b).unwrap())
    });
}

criterion_group!(benches, linear, train_steps, divergence);
criterion_main!(benches);
