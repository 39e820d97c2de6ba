mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use softneg_core::corpus::{load_corpus, split_of, synth_corpus, write_corpus, Record, Split};
use softneg_core::model::{load_checkpoint, VisionFeatures};
use softneg_core::pipeline::layout::{answer_input_text, answer_target, rationale_input_text};
use softneg_core::pipeline::metrics::{lcs_len, rouge_l, rouge_l_tokens};
use softneg_core::pipeline::train::{
    build_vocab, generate_answer, generate_rationale, infer_two_stage, method_counts,
    run_two_stage, train_answer_stage, train_rationale_stage,
};
use softneg_core::pipeline::{extract_answer, TrainConfig};
use softneg_core::sampler::{count_sites, sampler_fields, Lexicons, Method};
use softneg_core::text::tokenize;
use softneg_core::Error;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        answer_epochs: epochs,
        d_model: 16,
        d_ff: 32,
        max_gen_rationale: 48,
        ..TrainConfig::default()
    }
}

#[test]
fn empty_file_is_empty_corpus() {
    let f = tempfile::NamedTempFile::new().unwrap();
    assert!(load_corpus(f.path()).unwrap().is_empty());
}

#[test]
fn bad_answer_index_is_a_schema_error() {
    let mut r = synth_corpus(1, 0).unwrap().remove(0);
    r.answer_index = r.options.len();
    let f = tempfile::NamedTempFile::new().unwrap();
    write_corpus(f.path(), &[r]).unwrap();
    assert!(matches!(load_corpus(f.path()), Err(Error::Schema { .. })));
}

#[test]
fn malformed_line_reports_line_number() {
    let f = tempfile::NamedTempFile::new().unwrap();
    let good = serde_json::to_string(&synth_corpus(1, 0).unwrap()[0]).unwrap();
    std::fs::write(f.path(), format!("{good}\n\n{{oops\n")).unwrap();
    assert!(matches!(
        load_corpus(f.path()),
        Err(Error::Parse { line: 3, .. })
    ));
}

#[test]
fn synth_fixture_round_trips_with_all_splits() {
    let a = synth_corpus(50, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_corpus(&p1, &a).unwrap();
    write_corpus(&p2, &synth_corpus(50, 42).unwrap()).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let back = load_corpus(&p1).unwrap();
    assert_eq!(back, a);
    for s in [Split::Train, Split::Val, Split::Test] {
        assert!(!split_of(&back, s).is_empty(), "{s} missing");
    }
    assert!(matches!(synth_corpus(0, 1), Err(Error::Config(_))));
}

#[test]
fn every_synth_template_has_a_lexical_site() {
    let lx = Lexicons::builtin();
    for r in synth_corpus(25, 3).unwrap() {
        r.validate().unwrap();
        let (l, e) = sampler_fields(&r);
        let total: usize = [
            Method::Number,
            Method::Orientation,
            Method::Unit,
            Method::OptionText,
        ]
        .iter()
        .map(|&m| {
            count_sites(m, &l, &r.options, r.answer_index, &lx)
                + count_sites(m, &e, &r.options, r.answer_index, &lx)
        })
        .sum();
        assert!(total > 0, "{} has no lexical site", r.id);
    }
}

#[test]
fn answer_input_puts_rationale_after_options() {
    for r in synth_corpus(10, 5).unwrap() {
        let base = rationale_input_text(&r);
        let full = answer_input_text(&r, "because");
        assert!(full.starts_with(&base));
        assert!(full.ends_with(" Solution: because"));
        let target = answer_target(&r);
        assert_eq!(extract_answer(&target, &r.options).index, r.answer_index);
    }
}

#[test]
fn lambda_zero_has_zero_margin_column() {
    let records = synth_corpus(12, 1).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..quick(2)
    };
    let out = train_rationale_stage(&records, &vocab, &lx, &cfg).unwrap();
    assert!(out
        .log
        .epochs
        .iter()
        .all(|e| e.bml == 0.0 && e.mean_delta.is_none()));
    let csv = out.log.to_csv();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn nll_falls_in_most_epochs() {
    let records = synth_corpus(50, 42).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig {
        epochs: 200,
        eval_every: 200,
        ..TrainConfig::default()
    };
    let log = train_rationale_stage(&records, &vocab, &lx, &cfg)
        .unwrap()
        .log;
    let nll: Vec<f64> = log.epochs.iter().map(|e| e.nll).collect();
    let falls = nll.windows(2).filter(|w| w[1] < w[0]).count();
    let frac = falls as f64 / (nll.len() - 1) as f64;
    assert!(frac >= 0.9, "nll fell in {frac} of epochs");
}

#[test]
fn divergence_is_reported() {
    let records = synth_corpus(12, 1).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig {
        optimizer: "sgd".parse().unwrap(),
        lr: 1e300,
        clip_norm: 0.0,
        ..quick(3)
    };
    let err = train_rationale_stage(&records, &vocab, &lx, &cfg)
        .err()
        .unwrap();
    assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
}

#[test]
fn empty_val_split_is_rejected() {
    let records: Vec<Record> = synth_corpus(12, 1)
        .unwrap()
        .into_iter()
        .filter(|r| r.split != Split::Val)
        .collect();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    assert!(matches!(
        train_rationale_stage(&records, &vocab, &lx, &quick(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn overfit_single_record_emits_exact_target() {
    let mut records = synth_corpus(1, 9).unwrap();
    records[0].split = Split::Train;
    let mut val = records[0].clone();
    val.id = "val-copy".into();
    val.split = Split::Val;
    records.push(val);
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig {
        lr: 3e-3,
        eval_every: 10,
        ..quick(60)
    };
    let out = train_answer_stage(&records, &vocab, None, None, &cfg).unwrap();
    let r = &records[0];
    let text = generate_answer(&out.last, r, &r.rationale(), &vocab, &cfg).unwrap();
    assert_eq!(text, vocab.decode(&vocab.encode(&answer_target(r))));
    assert_eq!(extract_answer(&text, &r.options).index, r.answer_index);
}

#[test]
fn no_vision_ignores_vision_features() {
    let with: Vec<Record> = synth_corpus(12, 4).unwrap();
    let zeroed: Vec<Record> = with
        .iter()
        .cloned()
        .map(|mut r| {
            let v = r.vision.as_ref().unwrap();
            r.vision = Some(VisionFeatures::zeros(v.num_patches(), v.dim()));
            r
        })
        .collect();
    let omitted: Vec<Record> = with
        .iter()
        .cloned()
        .map(|mut r| {
            r.vision = None;
            r
        })
        .collect();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&with, &lx);
    let cfg = TrainConfig {
        no_vision: true,
        ..quick(2)
    };
    let a = train_answer_stage(&zeroed, &vocab, None, None, &cfg).unwrap();
    let b = train_answer_stage(&omitted, &vocab, None, None, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
}

#[test]
fn disabled_transform_never_reaches_the_log() {
    let records = synth_corpus(15, 2).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let cfg = TrainConfig {
        disable_option: true,
        disable_unit: true,
        ..quick(2)
    };
    let log = train_rationale_stage(&records, &vocab, &lx, &cfg)
        .unwrap()
        .log;
    let seen = method_counts(&log);
    assert!(!seen.contains_key(&Method::OptionText));
    assert!(!seen.contains_key(&Method::Unit));
    assert!(seen.get(&Method::Number).copied().unwrap_or(0) > 0);
}

#[test]
fn fixed_negatives_repeat_each_epoch() {
    let records = synth_corpus(15, 2).unwrap();
    let lx = Lexicons::builtin();
    let vocab = build_vocab(&records, &lx);
    let digests = |fixed: bool| -> BTreeSet<String> {
        let cfg = TrainConfig {
            fixed_negatives: fixed,
            ..quick(3)
        };
        train_rationale_stage(&records, &vocab, &lx, &cfg)
            .unwrap()
            .log
            .epochs
            .into_iter()
            .filter_map(|e| e.negatives_digest)
            .collect()
    };
    assert_eq!(digests(true).len(), 1);
    assert!(digests(false).len() > 1);
}

#[test]
fn two_stage_run_is_reproducible_and_composable() {
    let records = synth_corpus(15, 6).unwrap();
    let cfg = quick(3);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let run = run_two_stage(&records, &cfg, Some(d1.path())).unwrap();
    run_two_stage(&records, &cfg, Some(d2.path())).unwrap();
    for file in [
        "rationale_metrics.csv",
        "answer_metrics.csv",
        "summary.json",
        "f.ckpt",
        "g.ckpt",
    ] {
        assert_eq!(
            std::fs::read(d1.path().join(file)).unwrap(),
            std::fs::read(d2.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    let (f, vocab) = load_checkpoint(&d1.path().join("f.ckpt")).unwrap();
    assert_eq!(f, run.f);
    assert_eq!(vocab, run.vocab);
    let r = &records[0];
    let inf = infer_two_stage(r, &run.f, &run.g, &run.vocab, &cfg).unwrap();
    let rationale = generate_rationale(&run.f, r, &run.vocab, &cfg).unwrap();
    let answer = generate_answer(&run.g, r, &rationale, &run.vocab, &cfg).unwrap();
    assert_eq!(inf.rationale, rationale);
    assert_eq!(inf.answer_text, answer);
    assert_eq!(inf.index, extract_answer(&answer, &r.options).index);
    assert_eq!(
        inf,
        infer_two_stage(r, &run.f, &run.g, &run.vocab, &cfg).unwrap()
    );
}

#[test]
fn rouge_known_cases() {
    assert_eq!(rouge_l("the cat", "the cat"), 1.0);
    assert!((rouge_l("a b c d", "a c") - 2.0 / 3.0).abs() <= 1e-12);
    assert_eq!(rouge_l("x y z", "a b c"), 0.0);
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn rouge_matches_oracle(c in words(), r in words()) {
        prop_assert_eq!(lcs_len(&c, &r), common::lcs_bruteforce(&c, &r));
        let f = rouge_l_tokens(&c, &r);
        prop_assert!((0.0..=1.0).contains(&f));
        if !r.is_empty() {
            prop_assert_eq!(f, common::rouge_oracle(&c, &r));
            let joined = c.join(" ");
            prop_assert_eq!(rouge_l(&joined, &r.join(" ")), f);
            prop_assert_eq!(tokenize(&joined), c);
        }
    }
}
