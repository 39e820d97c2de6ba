use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softneg_core::corpus::synth_corpus;
use softneg_core::model::{decode_nll, encode, Bound, ModelParams};
use softneg_core::pipeline::layout::build_rationale_input;
use softneg_core::pipeline::metrics::rouge_l;
use softneg_core::pipeline::train::{build_vocab, model_config, rationale_target};
use softneg_core::pipeline::TrainConfig;
use softneg_core::sampler::{base_rationale, sample_soft_negatives, Lexicons, SamplerConfig};
use softneg_core::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Tensor::from_rows(&data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, w) = (random(&mut rng, 128, 64), random(&mut rng, 64, 64));
    c.bench_function("matmul_t 128x64x64 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let y = g.param(w.clone());
            let z = g.matmul_t(x, y).unwrap();
            let s = g.sum(z);
            g.backward(s).unwrap();
            black_box(g.grad(x).unwrap()[0])
        })
    });
}

fn training_step(c: &mut Criterion) {
    let records = synth_corpus(4, 1).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::init(
        model_config(&vocab, &records, &cfg, cfg.max_len_rationale).unwrap(),
        &mut rng,
    )
    .unwrap();
    let r = &records[0];
    let input = build_rationale_input(r, &vocab, cfg.max_len_rationale);
    let target = rationale_target(r, &vocab, &cfg);
    c.bench_function("rationale nll fwd+bwd d=64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = Bound::trainable(&mut g, &params);
            let h = encode(&mut g, &p, &input, r.vision.as_ref()).unwrap();
            let nll = decode_nll(&mut g, &p, h, &target).unwrap();
            g.backward(nll.loss).unwrap();
            black_box(g.scalar_value(nll.loss).unwrap())
        })
    });
}

fn sampler(c: &mut Criterion) {
    let records = synth_corpus(50, 42).unwrap();
    let lx = Lexicons::builtin();
    let cfg = SamplerConfig::default();
    c.bench_function("soft negatives x50 records", |b| {
        b.iter(|| {
            records
                .iter()
                .map(|r| sample_soft_negatives(r, &lx, &cfg, black_box(3)).len())
                .sum::<usize>()
        })
    });
}

fn rouge(c: &mut Criterion) {
    let records = synth_corpus(2, 7).unwrap();
    let (a, b2) = (base_rationale(&records[0]), base_rationale(&records[1]));
    c.bench_function("rouge_l rationale pair", |b| {
        b.iter(|| rouge_l(black_box(&a), black_box(&b2)))
    });
}

criterion_group!(benches, matmul, training_step, sampler, rouge);
criterion_main!(benches);
