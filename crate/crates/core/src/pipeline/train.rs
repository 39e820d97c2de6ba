//! Two-stage training and inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RationaleSource, TrainConfig};
use super::layout::{
    answer_input_text, answer_target, build_answer_input, build_rationale_input, extract_answer,
};
use super::metrics::rouge_l;
use super::optim::{scheduled_lr, Optimizer};
use crate::autodiff::Graph;
use crate::contrastive::{
    bml_terms, embed_rationale, generated_embedding, rationale_ids, rg_objective_var,
    EMPTY_RATIONALE,
};
use crate::corpus::{split_of, Record, Split, SYNTH_VISION_DIM};
use crate::error::{Error, Result};
use crate::model::{
    decode_nll, encode, generate, save_checkpoint, Bound, ModelConfig, ModelParams, VisionFeatures,
};
use crate::sampler::{base_rationale, sample_soft_negatives, Lexicons, Method};
use crate::text::{Vocab, EOS};

/// Record id to rationale text.
pub type RationaleMap = BTreeMap<String, String>;

/// One vocabulary shared by both stages: every text field, the fixed
/// layout words and every lexicon form a negative could introduce.
pub fn build_vocab(records: &[Record], lexicons: &Lexicons) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        texts.push(answer_input_text(r, &r.rationale()));
        texts.push(answer_target(r));
    }
    texts.push(EMPTY_RATIONALE.to_string());
    texts.push("not do does".to_string());
    let lx = lexicons.file();
    for (a, b) in &lx.orientation_pairs {
        texts.push(format!("{a} {b}"));
    }
    for units in lx.unit_categories.values() {
        for (s, p) in units {
            texts.push(format!("{s} {p}"));
        }
    }
    texts.extend(lx.negation_aux.iter().cloned());
    for (b, t) in &lx.verbs {
        texts.push(format!("{b} {t}"));
    }
    Vocab::build(texts.iter().map(String::as_str))
}

pub fn load_lexicons(cfg: &TrainConfig) -> Result<Lexicons> {
    if cfg.lexicons.is_empty() {
        Ok(Lexicons::builtin())
    } else {
        Lexicons::load(Path::new(&cfg.lexicons))
    }
}

fn vision_dim(records: &[Record]) -> Result<usize> {
    let mut dim = None;
    for r in records {
        if let Some(v) = &r.vision {
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::Schema {
                        id: r.id.clone(),
                        message: format!("vision dim {} differs from {d}", v.dim()),
                    })
                }
                _ => {}
            }
        }
    }
    Ok(dim.unwrap_or(SYNTH_VISION_DIM))
}

pub fn model_config(
    vocab: &Vocab,
    records: &[Record],
    cfg: &TrainConfig,
    max_len: usize,
) -> Result<ModelConfig> {
    Ok(ModelConfig {
        vocab_size: vocab.len(),
        d_model: cfg.d_model,
        d_vision: vision_dim(records)?,
        d_ff: cfg.d_ff,
        max_len,
        positional: cfg.positional,
    })
}

/// Vision input as the model sees it; `None` under `no_vision`.
pub fn vision_of<'r>(record: &'r Record, cfg: &TrainConfig) -> Option<&'r VisionFeatures> {
    if cfg.no_vision {
        None
    } else {
        record.vision.as_ref()
    }
}

/// Rationale-stage decoder target: rationale tokens, cut to the generation
/// budget, then EOS.
pub fn rationale_target(record: &Record, vocab: &Vocab, cfg: &TrainConfig) -> Vec<usize> {
    let mut ids = rationale_ids(vocab, &record.rationale());
    ids.truncate(cfg.max_gen_rationale);
    ids.push(EOS);
    ids
}

fn answer_target_ids(record: &Record, vocab: &Vocab, cfg: &TrainConfig) -> Vec<usize> {
    let mut ids = vocab.encode(&answer_target(record));
    ids.truncate(cfg.max_gen_answer);
    ids.push(EOS);
    ids
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// mean per-example teacher-forced NLL
    pub nll: f64,
    /// mean per-example margin loss
    pub bml: f64,
    pub mean_delta: Option<f64>,
    pub rouge_l: Option<f64>,
    pub accuracy: Option<f64>,
    pub negatives: BTreeMap<String, usize>,
    pub lower_active: usize,
    pub upper_active: usize,
    /// SHA-256 over the epoch's (record id, negative text) pairs, sorted
    pub negatives_digest: Option<String>,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageLog {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl StageLog {
    /// `epoch,nll,bml,mean_delta,rouge_l,accuracy`; missing values empty.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = String::from("epoch,nll,bml,mean_delta,rouge_l,accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.nll,
                e.bml,
                opt(e.mean_delta),
                opt(e.rouge_l),
                opt(e.accuracy)
            );
        }
        s
    }
}

pub struct StageResult {
    /// params of the best validation epoch
    pub params: ModelParams,
    /// params after the final epoch
    pub last: ModelParams,
    pub log: StageLog,
}

fn require(records: &[&Record], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config(format!("{what} split is empty")));
    }
    Ok(())
}

fn new_params(config: ModelConfig, seed: u64, stage: u64) -> Result<ModelParams> {
    ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed ^ (stage << 32)))
}

fn add_into(acc: &mut [Vec<f64>], grads: Vec<Vec<f64>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += y;
        }
    }
}

fn zero_grads(params: &ModelParams) -> Vec<Vec<f64>> {
    params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.len()])
        .collect()
}

/// Keeps the params of the best epoch; ties go to the earliest.
struct Best {
    epoch: usize,
    metric: f64,
    params: Option<ModelParams>,
}

impl Best {
    fn new() -> Self {
        Self {
            epoch: 0,
            metric: f64::NEG_INFINITY,
            params: None,
        }
    }

    fn offer(&mut self, epoch: usize, metric: f64, params: &ModelParams) {
        if metric > self.metric || self.params.is_none() {
            self.epoch = epoch;
            self.metric = metric;
            self.params = Some(params.clone());
        }
    }
}

struct ExampleOut {
    nll: f64,
    bml: f64,
    deltas: Vec<f64>,
    lower_active: usize,
    upper_active: usize,
}

/// Forward and backward for one rationale-stage example; gradients are
/// scaled by `weight` and added to `acc`.
fn rationale_example(
    params: &ModelParams,
    record: &Record,
    negatives: &[String],
    vocab: &Vocab,
    cfg: &TrainConfig,
    weight: f64,
    acc: &mut [Vec<f64>],
) -> Result<ExampleOut> {
    let mut g = Graph::new();
    let p = Bound::trainable(&mut g, params);
    let input = build_rationale_input(record, vocab, cfg.max_len_rationale);
    let h_enc = encode(&mut g, &p, &input, vision_of(record, cfg))?;
    let target = rationale_target(record, vocab, cfg);
    let nll = decode_nll(&mut g, &p, h_enc, &target)?;
    let nll_value = g.scalar_value(nll.loss)?;
    let mut out = ExampleOut {
        nll: nll_value,
        bml: 0.0,
        deltas: Vec::new(),
        lower_active: 0,
        upper_active: 0,
    };
    let loss = if cfg.lambda > 0.0 && !negatives.is_empty() {
        let body = target.len() - 1;
        let logits = g.slice_rows(nll.logits, 0, body)?;
        let h = generated_embedding(&mut g, &p, logits, cfg.bml_mode)?;
        let pos_ids = &target[..body];
        let mut pos = embed_rationale(&mut g, &p, pos_ids)?;
        let mut negs = Vec::with_capacity(negatives.len());
        for text in negatives {
            let mut ids = rationale_ids(vocab, text);
            ids.truncate(cfg.max_gen_rationale);
            let mut v = embed_rationale(&mut g, &p, &ids)?;
            if cfg.stop_grad_targets {
                v = g.detach(v);
            }
            negs.push(v);
        }
        if cfg.stop_grad_targets {
            pos = g.detach(pos);
        }
        let terms = bml_terms(&mut g, h, pos, &negs, cfg.margins()?)?;
        out.bml = g.scalar_value(terms.loss)?;
        out.deltas = terms.deltas;
        out.lower_active = terms.lower_active;
        out.upper_active = terms.upper_active;
        rg_objective_var(&mut g, nll.loss, terms.loss, cfg.lambda)?
    } else {
        nll.loss
    };
    let scaled = g.scale(loss, weight);
    g.backward(scaled)?;
    add_into(acc, p.grads(&g));
    Ok(out)
}

fn answer_example(
    params: &ModelParams,
    record: &Record,
    rationale: &str,
    vocab: &Vocab,
    cfg: &TrainConfig,
    weight: f64,
    acc: &mut [Vec<f64>],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = Bound::trainable(&mut g, params);
    let input = build_answer_input(record, rationale, vocab, cfg.max_len_answer);
    let h_enc = encode(&mut g, &p, &input, vision_of(record, cfg))?;
    let target = answer_target_ids(record, vocab, cfg);
    let nll = decode_nll(&mut g, &p, h_enc, &target)?;
    let value = g.scalar_value(nll.loss)?;
    let scaled = g.scale(nll.loss, weight);
    g.backward(scaled)?;
    add_into(acc, p.grads(&g));
    Ok(value)
}

/// Greedy rationale from stage one.
pub fn generate_rationale(
    f: &ModelParams,
    record: &Record,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<String> {
    let input = build_rationale_input(record, vocab, cfg.max_len_rationale);
    let ids = generate(f, &input, vision_of(record, cfg), cfg.max_gen_rationale)?;
    Ok(vocab.decode(&ids))
}

/// Greedy answer text from stage two given a rationale.
pub fn generate_answer(
    g: &ModelParams,
    record: &Record,
    rationale: &str,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<String> {
    let input = build_answer_input(record, rationale, vocab, cfg.max_len_answer);
    let ids = generate(g, &input, vision_of(record, cfg), cfg.max_gen_answer)?;
    Ok(vocab.decode(&ids))
}

/// Mean ROUGE-L of generated against gold rationales.
pub fn rationale_rouge(
    f: &ModelParams,
    records: &[&Record],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in records {
        total += rouge_l(&generate_rationale(f, r, vocab, cfg)?, &base_rationale(r));
    }
    Ok(total / records.len() as f64)
}

fn rationale_or_gold<'a>(record: &'a Record, map: Option<&'a RationaleMap>) -> String {
    match map {
        None => record.rationale(),
        Some(m) => match m.get(&record.id) {
            Some(r) => r.clone(),
            None => {
                warn!("no rationale for {}; using gold", record.id);
                record.rationale()
            }
        },
    }
}

/// Fraction of records whose answer parses to the correct option.
pub fn answer_accuracy(
    g: &ModelParams,
    records: &[&Record],
    rationales: Option<&RationaleMap>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for r in records {
        let text = generate_answer(g, r, &rationale_or_gold(r, rationales), vocab, cfg)?;
        let ex = extract_answer(&text, &r.options);
        if ex.parsed && ex.index == r.answer_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

fn check_finite(value: f64, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { epoch, step })
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Trains the rationale model with `nll + λ·bml`, keeping the epoch with
/// the best validation ROUGE-L.
pub fn train_rationale_stage(
    records: &[Record],
    vocab: &Vocab,
    lexicons: &Lexicons,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    cfg.validate()?;
    let train = split_of(records, Split::Train);
    let val = split_of(records, Split::Val);
    require(&train, "train")?;
    require(&val, "val")?;
    let mut params = new_params(
        model_config(vocab, records, cfg, cfg.max_len_rationale)?,
        cfg.seed,
        1,
    )?;
    let mut opt = Optimizer::new(&params, cfg);
    let sampler = cfg.sampler();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = StageLog {
        stage: "rationale".into(),
        ..StageLog::default()
    };
    let mut best = Best::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        opt.set_lr(scheduled_lr(cfg, epoch, cfg.epochs));
        order.shuffle(&mut shuffle);
        let mut e = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        let mut seen: Vec<(&str, String)> = Vec::new();
        let mut deltas = Vec::new();
        for batch in batches(&order, cfg.batch_size) {
            let mut acc = zero_grads(&params);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let r = train[i];
                let negs = if cfg.lambda > 0.0 {
                    sample_soft_negatives(r, lexicons, &sampler, epoch - 1)
                } else {
                    Vec::new()
                };
                for n in &negs {
                    *e.negatives.entry(n.method.name().to_string()).or_default() += 1;
                    seen.push((&r.id, n.text.clone()));
                }
                let texts: Vec<String> = negs.into_iter().map(|n| n.text).collect();
                let out = rationale_example(&params, r, &texts, vocab, cfg, weight, &mut acc)?;
                check_finite(out.nll + out.bml, epoch, step)?;
                e.nll += out.nll;
                e.bml += out.bml;
                e.lower_active += out.lower_active;
                e.upper_active += out.upper_active;
                deltas.extend(out.deltas);
            }
            opt.step(&mut params, &acc);
            step += 1;
            if !params.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
        }
        let n = train.len() as f64;
        e.nll /= n;
        e.bml /= n;
        e.steps = step;
        if !deltas.is_empty() {
            e.mean_delta = Some(deltas.iter().sum::<f64>() / deltas.len() as f64);
            seen.sort();
            let mut digest = Sha256::new();
            for (id, text) in &seen {
                digest.update(id.as_bytes());
                digest.update([0]);
                digest.update(text.as_bytes());
                digest.update([0]);
            }
            e.negatives_digest = Some(hex(&digest.finalize()));
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let score = rationale_rouge(&params, &val, vocab, cfg)?;
            e.rouge_l = Some(score);
            best.offer(epoch, score, &params);
        }
        info!(
            "rationale epoch {epoch}: nll {:.4} bml {:.4} rouge_l {:?}",
            e.nll, e.bml, e.rouge_l
        );
        log.epochs.push(e);
    }
    log.best_epoch = best.epoch;
    log.best_metric = best.metric;
    Ok(StageResult {
        params: best.params.expect("at least one evaluated epoch"),
        last: params,
        log,
    })
}

/// Trains the answer model on `input ∘ rationale` with the plain NLL,
/// keeping the epoch with the best validation accuracy.
///
/// `train_rationales = None` trains on gold rationales. Validation uses
/// `eval_rationales`, falling back to gold per record when missing.
pub fn train_answer_stage(
    records: &[Record],
    vocab: &Vocab,
    train_rationales: Option<&RationaleMap>,
    eval_rationales: Option<&RationaleMap>,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    cfg.validate()?;
    let train = split_of(records, Split::Train);
    let val = split_of(records, Split::Val);
    require(&train, "train")?;
    require(&val, "val")?;
    let mut params = new_params(
        model_config(vocab, records, cfg, cfg.max_len_answer)?,
        cfg.seed,
        2,
    )?;
    let mut opt = Optimizer::new(&params, cfg);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let inputs: Vec<String> = train
        .iter()
        .map(|r| rationale_or_gold(r, train_rationales))
        .collect();
    let mut log = StageLog {
        stage: "answer".into(),
        ..StageLog::default()
    };
    let mut best = Best::new();
    let mut step = 0;
    for epoch in 1..=cfg.answer_epochs {
        opt.set_lr(scheduled_lr(cfg, epoch, cfg.answer_epochs));
        order.shuffle(&mut shuffle);
        let mut e = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        for batch in batches(&order, cfg.batch_size) {
            let mut acc = zero_grads(&params);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let nll =
                    answer_example(&params, train[i], &inputs[i], vocab, cfg, weight, &mut acc)?;
                check_finite(nll, epoch, step)?;
                e.nll += nll;
            }
            opt.step(&mut params, &acc);
            step += 1;
            if !params.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
        }
        e.nll /= train.len() as f64;
        e.steps = step;
        if epoch % cfg.eval_every == 0 || epoch == cfg.answer_epochs {
            let acc = answer_accuracy(&params, &val, eval_rationales, vocab, cfg)?;
            e.accuracy = Some(acc);
            best.offer(epoch, acc, &params);
        }
        info!(
            "answer epoch {epoch}: nll {:.4} accuracy {:?}",
            e.nll, e.accuracy
        );
        log.epochs.push(e);
    }
    log.best_epoch = best.epoch;
    log.best_metric = best.metric;
    Ok(StageResult {
        params: best.params.expect("at least one evaluated epoch"),
        last: params,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Inference {
    pub rationale: String,
    pub answer_text: String,
    pub index: usize,
    pub parsed: bool,
}

/// `R = f(X)`, then the answer parsed from `g(X ∘ R)`.
pub fn infer_two_stage(
    record: &Record,
    f: &ModelParams,
    g: &ModelParams,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Inference> {
    let rationale = generate_rationale(f, record, vocab, cfg)?;
    let answer_text = generate_answer(g, record, &rationale, vocab, cfg)?;
    let ex = extract_answer(&answer_text, &record.options);
    Ok(Inference {
        rationale,
        answer_text,
        index: ex.index,
        parsed: ex.parsed,
    })
}

/// Stage-one rationales for every record.
pub fn generate_rationales(
    f: &ModelParams,
    records: &[Record],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<RationaleMap> {
    records
        .iter()
        .map(|r| Ok((r.id.clone(), generate_rationale(f, r, vocab, cfg)?)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SplitScore {
    pub count: usize,
    pub accuracy: f64,
    pub rouge_l: f64,
    pub unparsed: usize,
    /// accuracy per subject tag
    pub by_subject: BTreeMap<String, f64>,
}

/// Two-stage accuracy and rationale ROUGE-L over `records`, using
/// precomputed stage-one rationales.
pub fn score_split(
    g: &ModelParams,
    records: &[&Record],
    rationales: &RationaleMap,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<SplitScore> {
    let mut s = SplitScore {
        count: records.len(),
        ..SplitScore::default()
    };
    if records.is_empty() {
        return Ok(s);
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for r in records {
        let rationale = rationale_or_gold(r, Some(rationales));
        s.rouge_l += rouge_l(&rationale, &base_rationale(r));
        let ex = extract_answer(&generate_answer(g, r, &rationale, vocab, cfg)?, &r.options);
        let ok = ex.parsed && ex.index == r.answer_index;
        correct += ok as usize;
        s.unparsed += !ex.parsed as usize;
        let entry = per.entry(r.subject.clone()).or_default();
        entry.0 += ok as usize;
        entry.1 += 1;
    }
    let n = records.len() as f64;
    s.accuracy = correct as f64 / n;
    s.rouge_l /= n;
    s.by_subject = per
        .into_iter()
        .map(|(k, (c, t))| (k, c as f64 / t as f64))
        .collect();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub train: SplitScore,
    pub val: SplitScore,
    pub test: SplitScore,
}

/// Scores saved models on every split without training.
pub fn evaluate(
    records: &[Record],
    f: &ModelParams,
    g: &ModelParams,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(EvalReport, RationaleMap)> {
    let rationales = generate_rationales(f, records, vocab, cfg)?;
    let score = |split| score_split(g, &split_of(records, split), &rationales, vocab, cfg);
    let report = EvalReport {
        train: score(Split::Train)?,
        val: score(Split::Val)?,
        test: score(Split::Test)?,
    };
    Ok((report, rationales))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: BTreeMap<String, String>,
    pub rationale: StageLog,
    pub answer: StageLog,
    pub train: SplitScore,
    pub val: SplitScore,
    pub test: SplitScore,
    /// train split scored with the final-epoch models of both stages
    pub train_final: SplitScore,
}

pub struct TwoStageRun {
    pub vocab: Vocab,
    pub f: ModelParams,
    pub g: ModelParams,
    pub rationales: RationaleMap,
    pub summary: RunSummary,
}

fn config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    cfg.to_kv()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Full pipeline: rationale stage, stage-one generation, answer stage and
/// evaluation on every split. With `out_dir`, writes the metric CSVs, a
/// JSON summary, the config and both checkpoints.
pub fn run_two_stage(
    records: &[Record],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TwoStageRun> {
    cfg.validate()?;
    for r in records {
        r.validate()?;
    }
    let lexicons = load_lexicons(cfg)?;
    let vocab = build_vocab(records, &lexicons);
    let stage1 = train_rationale_stage(records, &vocab, &lexicons, cfg)?;
    let rationales = generate_rationales(&stage1.params, records, &vocab, cfg)?;
    let train_source = match cfg.answer_rationale {
        RationaleSource::Gold => None,
        RationaleSource::Generated => Some(&rationales),
    };
    let stage2 = train_answer_stage(records, &vocab, train_source, Some(&rationales), cfg)?;
    let score = |split| -> Result<SplitScore> {
        score_split(
            &stage2.params,
            &split_of(records, split),
            &rationales,
            &vocab,
            cfg,
        )
    };
    let train_split = split_of(records, Split::Train);
    let mut final_rationales = RationaleMap::new();
    for r in &train_split {
        final_rationales.insert(
            r.id.clone(),
            generate_rationale(&stage1.last, r, &vocab, cfg)?,
        );
    }
    let train_final = score_split(&stage2.last, &train_split, &final_rationales, &vocab, cfg)?;
    let summary = RunSummary {
        config: config_map(cfg),
        rationale: stage1.log,
        answer: stage2.log,
        train: score(Split::Train)?,
        val: score(Split::Val)?,
        test: score(Split::Test)?,
        train_final,
    };
    let run = TwoStageRun {
        vocab,
        f: stage1.params,
        g: stage2.params,
        rationales,
        summary,
    };
    if let Some(dir) = out_dir {
        write_run(dir, &run, cfg)?;
    }
    Ok(run)
}

#[derive(Serialize, Deserialize)]
struct RationaleLine {
    id: String,
    rationale: String,
}

/// One `{"id", "rationale"}` object per line, in id order.
pub fn rationales_jsonl(map: &RationaleMap) -> Result<String> {
    let mut rows = String::new();
    for (id, text) in map {
        rows.push_str(&serde_json::to_string(&RationaleLine {
            id: id.clone(),
            rationale: text.clone(),
        })?);
        rows.push('\n');
    }
    Ok(rows)
}

pub fn load_rationales(path: &Path) -> Result<RationaleMap> {
    let text = fs::read_to_string(path)?;
    let mut map = RationaleMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RationaleLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(row.id, row.rationale);
    }
    Ok(map)
}

pub fn write_run(dir: &Path, run: &TwoStageRun, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_kv())?;
    fs::write(
        dir.join("rationale_metrics.csv"),
        run.summary.rationale.to_csv(),
    )?;
    fs::write(dir.join("answer_metrics.csv"), run.summary.answer.to_csv())?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&run.summary)? + "\n",
    )?;
    fs::write(
        dir.join("rationales.jsonl"),
        rationales_jsonl(&run.rationales)?,
    )?;
    save_checkpoint(&dir.join("f.ckpt"), &run.f, &run.vocab)?;
    save_checkpoint(&dir.join("g.ckpt"), &run.g, &run.vocab)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-method count of negatives, for wiring checks.
pub fn method_counts(log: &StageLog) -> BTreeMap<Method, usize> {
    let mut out = BTreeMap::new();
    for e in &log.epochs {
        for (name, n) in &e.negatives {
            if let Ok(m) = name.parse::<Method>() {
                *out.entry(m).or_default() += n;
            }
        }
    }
    out
}
