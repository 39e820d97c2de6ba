//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softneg_core::autodiff::Graph;
use softneg_core::contrastive::{bml_loss, bml_terms, ContrastiveBatch, Margins};
use softneg_core::corpus::{load_corpus, synth_corpus, Record};
use softneg_core::harness::run_configs;
use softneg_core::model::{
    cross_attention, cross_attention_with_weights, gated_fusion, project_vision, Bound,
    ModelConfig, ModelParams, ParamId,
};
use softneg_core::pipeline::metrics::{lcs_len, rouge_l, rouge_l_tokens};
use softneg_core::pipeline::train::run_two_stage;
use softneg_core::pipeline::TrainConfig;
use softneg_core::sampler::validate::check_negative;
use softneg_core::sampler::{
    count_sites, sample_soft_negatives, sampler_fields, Lexicons, Method, NegativeRow,
    SamplerConfig,
};
use softneg_core::Tensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.2?}, limit {limit:?}")
    })
}

fn bml_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10_000 {
        let beta: f64 = rng.random_range(0.0..1.0);
        let alpha: f64 = rng.random_range(0.0..=beta);
        let delta = match i % 4 {
            0 => -alpha,
            1 => -beta,
            _ => rng.random_range(-2.0..2.0),
        };
        let m = Margins::new(alpha, beta).map_err(|e| e.to_string())?;
        let loss = m.term(delta);
        let inside = (-beta..=-alpha).contains(&delta);
        ensure(loss >= 0.0, || {
            format!("negative loss at Δ={delta} α={alpha} β={beta}")
        })?;
        ensure((loss == 0.0) == inside, || {
            format!("zero set wrong at Δ={delta} α={alpha} β={beta}: {loss}")
        })?;
        let oracle = margin_oracle(delta, alpha, beta);
        ensure((loss - oracle).abs() <= 1e-12, || {
            format!("Δ={delta}: {loss} vs {oracle}")
        })?;
    }
    let e1 = vec![1.0, 0.0];
    let at = |neg: Vec<f64>| {
        bml_loss(&ContrastiveBatch {
            generated: vec![e1.clone()],
            positive: vec![e1.clone()],
            soft_negatives: vec![vec![neg]],
            alpha: 0.1,
            beta: 0.3,
            lambda: 0.1,
        })
        .map_err(|e| e.to_string())
    };
    let zero = at(e1.clone())?;
    let half = at(vec![0.5, 3f64.sqrt() / 2.0])?;
    ensure((zero - 0.1).abs() <= 1e-12, || format!("Δ=0 gave {zero}"))?;
    ensure((half - 0.2).abs() <= 1e-12, || {
        format!("Δ=-0.5 gave {half}")
    })?;

    // graph form agrees with the scalar form on random vectors
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = |rng: &mut ChaCha8Rng| {
            Tensor::vector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let mut g = Graph::new();
        let h = g.constant(v(&mut rng));
        let p = g.constant(v(&mut rng));
        let n = g.constant(v(&mut rng));
        let m = Margins::new(0.1, 0.3).map_err(|e| e.to_string())?;
        let terms = bml_terms(&mut g, h, p, &[n], m).map_err(|e| e.to_string())?;
        let got = g.scalar_value(terms.loss).map_err(|e| e.to_string())?;
        let want = m.term(terms.deltas[0]);
        ensure((got - want).abs() <= 1e-12, || {
            format!("graph {got} vs scalar {want}")
        })?;
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(1))?;
    Ok(format!("10000 random cases, closed forms exact, {el:.2?}"))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = [0.0f64; 3];
    for (k, (which, tol)) in [
        (Objective::Nll, 1e-4),
        (Objective::SoftBml, 1e-4),
        (Objective::Rg, 1e-3),
    ]
    .into_iter()
    .enumerate()
    {
        for seed in 0..20 {
            let r = model_grad_check(seed, which);
            worst[k] = worst[k].max(r.max_rel_error);
            ensure(r.max_rel_error <= tol, || {
                format!(
                    "{which:?} seed {seed}: {} at {:?}",
                    r.max_rel_error, r.worst
                )
            })?;
        }
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(60))?;
    Ok(format!(
        "20 seeds, worst rel err nll {:.1e} bml {:.1e} rg {:.1e}, {el:.2?}",
        worst[0], worst[1], worst[2]
    ))
}

fn oracle_params(
    n: usize,
    m: usize,
    d: usize,
    dv: usize,
    rng: &mut ChaCha8Rng,
) -> (ModelParams, Mat, Mat) {
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: d,
        d_vision: dv,
        d_ff: 3,
        max_len: 16,
        positional: true,
    };
    let p = ModelParams::init(cfg, rng).expect("init");
    let text = rand_mat(rng, n, d);
    let patches = rand_mat(rng, m, dv);
    (p, text, patches)
}

fn fusion_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, d, dv) = (
            rng.random_range(1..8),
            rng.random_range(1..7),
            rng.random_range(1..9),
            rng.random_range(1..6),
        );
        let (p, text, patches) = oracle_params(n, m, d, dv, &mut rng);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let ht = g.constant(Tensor::from_rows(&text).unwrap());
        let pv = g.constant(Tensor::from_rows(&patches).unwrap());
        let hv = project_vision(&mut g, &b, pv).unwrap();
        let att = cross_attention(&mut g, &b, ht, hv).unwrap();
        let fused = gated_fusion(&mut g, &b, ht, att).unwrap();
        let w = |id| to_mat(p.get(id));
        let hv_o = mul_t(&patches, &w(ParamId::VisionProj));
        let att_o = naive_attention(
            &text,
            &hv_o,
            &w(ParamId::FuseQuery),
            &w(ParamId::FuseKey),
            &w(ParamId::FuseValue),
        );
        let fused_o = naive_gated_fusion(
            &text,
            &att_o,
            &w(ParamId::GateText),
            &w(ParamId::GateVision),
        );
        let da = max_abs_diff(&to_mat(g.value(att)), &att_o);
        let df = max_abs_diff(&to_mat(g.value(fused)), &fused_o);
        worst = worst.max(da).max(df);
        ensure(da <= 1e-10 && df <= 1e-10, || {
            format!("shape seed {seed}: {da:e} / {df:e}")
        })?;
    }
    for seed in 0..20 {
        for single in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = if single { 1 } else { rng.random_range(2..7) };
            let (mut p, text, patches) = oracle_params(3, m, 4, 3, &mut rng);
            if !single {
                p.get_mut(ParamId::FuseQuery).data_mut().fill(0.0);
            }
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, &p);
            let ht = g.constant(Tensor::from_rows(&text).unwrap());
            let pv = g.constant(Tensor::from_rows(&patches).unwrap());
            let hv = project_vision(&mut g, &b, pv).unwrap();
            let (att, weights) = cross_attention_with_weights(&mut g, &b, ht, hv).unwrap();
            let want_w = 1.0 / m as f64;
            ensure(g.value(weights).data().iter().all(|&x| x == want_w), || {
                format!("seed {seed} m={m}: weights not exactly {want_w}")
            })?;
            let v = g.matmul_t(hv, b.var(ParamId::FuseValue)).unwrap();
            let v = to_mat(g.value(v));
            let mut mean = vec![0.0; 4];
            for vj in &v {
                for c in 0..4 {
                    mean[c] += want_w * vj[c];
                }
            }
            let want = if single { v[0].clone() } else { mean };
            ensure(to_mat(g.value(att)).iter().all(|row| *row == want), || {
                format!("seed {seed} m={m}: attended rows not exact")
            })?;
        }
    }
    Ok(format!(
        "100 shapes, max diff {worst:.1e}; m=1 and zero-query limits exact"
    ))
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn sampler_contract() -> Outcome {
    let lx = Lexicons::builtin();
    let records: Vec<Record> =
        load_corpus(&fixture_dir().join("sampler_records.jsonl")).map_err(|e| e.to_string())?;
    ensure(records.len() == 200, || {
        format!("fixture has {} records", records.len())
    })?;
    let cfg = SamplerConfig::default();
    let mut emitted = 0;
    let mut golden = String::new();
    for r in &records {
        for epoch in 0..3 {
            for n in sample_soft_negatives(r, &lx, &cfg, epoch) {
                let v = check_negative(r, &n, &lx, true);
                ensure(v.is_empty(), || format!("{} {:?}: {v:?}", r.id, n))?;
                emitted += 1;
                if epoch == 0 {
                    golden += &serde_json::to_string(&NegativeRow::new(&r.id, &n)).unwrap();
                    golden.push('\n');
                }
            }
        }
    }
    let committed = std::fs::read_to_string(fixture_dir().join("sampler_golden_seed42.jsonl"))
        .map_err(|e| e.to_string())?;
    ensure(committed == golden, || {
        "seed 42 output differs from goldens".into()
    })?;

    for method in [
        Method::Number,
        Method::Orientation,
        Method::Unit,
        Method::OptionText,
    ] {
        let mut checked = 0;
        for r in &records {
            let (lecture, explanation) = sampler_fields(r);
            let sites = |t: &str| count_sites(method, t, &r.options, r.answer_index, &lx);
            let n = match sites(&explanation) {
                0 => sites(&lecture),
                n => n,
            };
            if n < 2 {
                continue;
            }
            checked += 1;
            let seen: BTreeSet<String> = (0..50)
                .filter_map(|seed| {
                    let cfg = SamplerConfig {
                        seed,
                        ..SamplerConfig::default()
                    };
                    sample_soft_negatives(r, &lx, &cfg, 0)
                        .into_iter()
                        .find(|n| n.method == method)
                        .map(|n| n.text)
                })
                .collect();
            ensure(seen.len() >= 2, || {
                format!("{method} on {} not random", r.id)
            })?;
        }
        ensure(checked > 0, || {
            format!("{method}: no record with two sites")
        })?;
    }
    Ok(format!(
        "{emitted} negatives, 0 violations; goldens match; 4 transforms random"
    ))
}

fn rouge_suite() -> Outcome {
    let vocab = ["a", "b", "c", "d", "e", "f"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(0..12);
            (0..n)
                .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                .collect()
        };
        let c = seq(&mut rng);
        let r = seq(&mut rng);
        let (got, want) = (lcs_len(&c, &r), lcs_bruteforce(&c, &r));
        ensure(got == want, || format!("pair {i}: lcs {got} vs {want}"))?;
        if !r.is_empty() {
            let (f, o) = (rouge_l_tokens(&c, &r), rouge_oracle(&c, &r));
            ensure(f == o, || format!("pair {i}: rouge {f} vs {o}"))?;
        }
    }
    let v = rouge_l("a b c d", "a c");
    ensure((v - 2.0 / 3.0).abs() <= 1e-12, || {
        format!("known case gave {v}")
    })?;
    Ok("1000 pairs exact; known case 2/3".into())
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let records = synth_corpus(50, 42).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 150,
        answer_epochs: 150,
        eval_every: 25,
        lambda: 0.1,
        ..TrainConfig::default()
    };
    let run = run_two_stage(&records, &cfg, None).map_err(|e| e.to_string())?;
    let s = &run.summary;
    let acc = s.train_final.accuracy;
    let epochs = &s.rationale.epochs;
    let (first, last) = (epochs[0].bml, epochs[epochs.len() - 1].bml);
    let el = t.elapsed();
    ensure(acc >= 0.95, || format!("train accuracy {acc}"))?;
    ensure(last <= 0.5 * first, || format!("bml {first} -> {last}"))?;
    within(el, Duration::from_secs(600))?;
    Ok(format!(
        "train accuracy {acc:.3} after 150+150 epochs; bml {first:.4} -> {last:.5}; {el:.1?}"
    ))
}

fn ablation_direction() -> Outcome {
    let records = synth_corpus(50, 42).map_err(|e| e.to_string())?;
    let base = TrainConfig {
        epochs: 60,
        answer_epochs: 60,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let seeds = [1u64, 2, 3];
    let mut configs = Vec::new();
    for &seed in &seeds {
        let full = TrainConfig {
            seed,
            ..base.clone()
        };
        configs.push(full.clone());
        configs.push(TrainConfig {
            fixed_negatives: true,
            ..full.clone()
        });
        configs.push(TrainConfig {
            no_vision: true,
            ..full
        });
    }
    let runs = run_configs(&records, &configs, 1).map_err(|e| e.to_string())?;
    let (mut random_wins, mut vision_wins) = (0, 0);
    let mut detail = Vec::new();
    for (i, seed) in seeds.iter().enumerate() {
        let acc = |k: usize| runs[3 * i + k].test.accuracy;
        let (full, fixed, blind) = (acc(0), acc(1), acc(2));
        random_wins += usize::from(full >= fixed);
        vision_wins += usize::from(blind < full);
        detail.push(format!(
            "seed {seed}: full {full:.3} fixed {fixed:.3} no-vision {blind:.3}"
        ));
    }
    let detail = detail.join("; ");
    ensure(random_wins >= 2, || {
        format!("full ≥ fixed on {random_wins}/3 ({detail})")
    })?;
    ensure(vision_wins >= 2, || {
        format!("no-vision < full on {vision_wins}/3 ({detail})")
    })?;
    Ok(format!(
        "full ≥ fixed {random_wins}/3, no-vision < full {vision_wins}/3 ({detail})"
    ))
}

fn determinism() -> Outcome {
    let records = synth_corpus(20, 7).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 4,
        answer_epochs: 4,
        d_model: 16,
        d_ff: 32,
        max_gen_rationale: 48,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_two_stage(&records, &cfg, Some(d.path())).map_err(|e| e.to_string())?;
    }
    let files = [
        "rationale_metrics.csv",
        "answer_metrics.csv",
        "f.ckpt",
        "g.ckpt",
    ];
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} identical across two runs", files.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("margin loss correctness", bml_correctness),
        ("gradient suite", gradient_suite),
        ("fusion and attention oracles", fusion_oracles),
        ("sampler contract", sampler_contract),
        ("ROUGE-L", rouge_suite),
        ("end-to-end overfit", overfit),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(msg) => println!("PASS {} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg}", i + 1);
            }
        }
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
