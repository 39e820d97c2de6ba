//! Hyperparameter grid, ablation matrix and latent export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::contrastive::{embed_rationale, generated_embedding, rationale_ids};
use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::model::{decode_nll, encode, Bound, ModelParams};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::layout::build_rationale_input;
use crate::pipeline::train::{
    generate_rationale, method_counts, rationale_target, run_two_stage, vision_of, RunSummary,
};
use crate::sampler::{sample_soft_negatives, Lexicons, Method, Mods};
use crate::text::{Vocab, EOS};

/// Upper margin that switches the upper hinge off.
pub const BETA_WILDCARD: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub lambda_set: Vec<f64>,
    pub alpha_set: Vec<f64>,
    pub beta_set: Vec<f64>,
    pub base: TrainConfig,
    /// runs per cell, seeded `base.seed + rep`
    pub repetitions: usize,
}

impl SweepSpec {
    /// λ ∈ {0, 0.01, 0.1, 1}, α ∈ {0, 0.1, 0.2, 0.3}, β ∈ {0.1, 0.3, 0.5, 2}.
    pub fn standard(base: TrainConfig) -> Self {
        Self {
            lambda_set: vec![0.0, 0.01, 0.1, 1.0],
            alpha_set: vec![0.0, 0.1, 0.2, 0.3],
            beta_set: vec![0.1, 0.3, 0.5, BETA_WILDCARD],
            base,
            repetitions: 1,
        }
    }

    pub fn preset(name: &str, base: TrainConfig) -> Result<Self> {
        match name {
            "standard" | "paper" => Ok(Self::standard(base)),
            other => Err(Error::Config(format!("unknown sweep preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rep: usize,
    pub seed: u64,
    pub skip: Option<String>,
}

/// Enumerates the grid in (λ, α, β, rep) order, marking cells with α > β
/// as skipped unless β is the wildcard.
pub fn grid_cells(spec: &SweepSpec) -> Result<Vec<GridCell>> {
    if spec.lambda_set.is_empty()
        || spec.alpha_set.is_empty()
        || spec.beta_set.is_empty()
        || spec.repetitions == 0
    {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut out = Vec::new();
    for &lambda in &spec.lambda_set {
        for &alpha in &spec.alpha_set {
            for &beta in &spec.beta_set {
                for rep in 0..spec.repetitions {
                    let skip = (alpha > beta && beta != BETA_WILDCARD)
                        .then(|| format!("alpha {alpha} > beta {beta}"));
                    out.push(GridCell {
                        lambda,
                        alpha,
                        beta,
                        rep,
                        seed: spec.base.seed.wrapping_add(rep as u64),
                        skip,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: GridCell,
    pub val_rouge_l: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// negatives that fired the upper hinge over the whole run
    pub upper_active: Option<usize>,
}

/// Runs `jobs` independent tasks on worker threads and returns results in
/// task order.
fn run_jobs<T: Send>(
    n: usize,
    jobs: usize,
    task: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = task(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

/// Independent two-stage runs, one per config, on up to `jobs` threads.
pub fn run_configs(
    records: &[Record],
    configs: &[TrainConfig],
    jobs: usize,
) -> Result<Vec<RunSummary>> {
    run_jobs(configs.len(), jobs, |i| {
        Ok(run_two_stage(records, &configs[i], None)?.summary)
    })
}

fn cell_dir(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

/// One full two-stage run per grid cell.
pub fn grid_sweep(
    spec: &SweepSpec,
    records: &[Record],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let cells = grid_cells(spec)?;
    let rows = run_jobs(cells.len(), jobs, |i| {
        let cell = &cells[i];
        if cell.skip.is_some() {
            return Ok(SweepRow {
                cell: cell.clone(),
                val_rouge_l: None,
                val_accuracy: None,
                test_accuracy: None,
                upper_active: None,
            });
        }
        let cfg = TrainConfig {
            lambda: cell.lambda,
            alpha: cell.alpha,
            beta: cell.beta,
            seed: cell.seed,
            ..spec.base.clone()
        };
        let dir = cell_dir(out_dir, &format!("cell_{i:03}"));
        let run = run_two_stage(records, &cfg, dir.as_deref())?;
        let s = &run.summary;
        Ok(SweepRow {
            cell: cell.clone(),
            val_rouge_l: Some(s.val.rouge_l),
            val_accuracy: Some(s.val.accuracy),
            test_accuracy: Some(s.test.accuracy),
            upper_active: Some(s.rationale.epochs.iter().map(|e| e.upper_active).sum()),
        })
    })?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "lambda,alpha,beta,rep,seed,val_rouge_l,val_accuracy,test_accuracy,upper_active,status\n",
    );
    for r in rows {
        let c = &r.cell;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            c.lambda,
            c.alpha,
            c.beta,
            c.rep,
            c.seed,
            opt(&r.val_rouge_l),
            opt(&r.val_accuracy),
            opt(&r.test_accuracy),
            opt(&r.upper_active),
            c.skip
                .as_deref()
                .map_or("ok".to_string(), |why| format!("skipped: {why}"))
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AblationTable {
    /// full, each transform removed, fixed negatives
    Transforms,
    /// modifications per negative: 1, 2, 3, all
    Mods,
    /// vision features removed
    Vision,
}

impl AblationTable {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            2 => Ok(Self::Transforms),
            3 => Ok(Self::Mods),
            6 => Ok(Self::Vision),
            other => Err(Error::Config(format!("no ablation table {other}"))),
        }
    }
}

/// Named config variants of one table, `full` first.
pub fn ablation_variants(table: AblationTable, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut out = vec![("full".to_string(), base.clone())];
    match table {
        AblationTable::Transforms => {
            out.push(("w/o number".into(), with(&|c| c.disable_number = true)));
            out.push((
                "w/o orientation".into(),
                with(&|c| c.disable_orientation = true),
            ));
            out.push(("w/o unit".into(), with(&|c| c.disable_unit = true)));
            out.push(("w/o option".into(), with(&|c| c.disable_option = true)));
            out.push(("w/o random".into(), with(&|c| c.fixed_negatives = true)));
        }
        AblationTable::Mods => {
            for m in [Mods::Count(1), Mods::Count(2), Mods::Count(3), Mods::All] {
                out.push((format!("mods {m}"), with(&|c| c.mods = m)));
            }
        }
        AblationTable::Vision => {
            out.push(("w/o vision".into(), with(&|c| c.no_vision = true)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub val_rouge_l: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub delta_val_rouge_l: f64,
    pub delta_test_accuracy: f64,
    /// methods that produced at least one negative during training
    pub methods_seen: BTreeSet<Method>,
    /// distinct per-epoch negative digests
    pub distinct_negative_sets: usize,
}

fn ablation_row(name: &str, s: &RunSummary, full: Option<&RunSummary>) -> AblationRow {
    let full = full.unwrap_or(s);
    AblationRow {
        name: name.to_string(),
        val_rouge_l: s.val.rouge_l,
        val_accuracy: s.val.accuracy,
        test_accuracy: s.test.accuracy,
        delta_val_rouge_l: s.val.rouge_l - full.val.rouge_l,
        delta_test_accuracy: s.test.accuracy - full.test.accuracy,
        methods_seen: method_counts(&s.rationale)
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(m, _)| m)
            .collect(),
        distinct_negative_sets: s
            .rationale
            .epochs
            .iter()
            .filter_map(|e| e.negatives_digest.as_deref())
            .collect::<BTreeSet<_>>()
            .len(),
    }
}

/// Runs every variant of `table` with only its flag changed. Variants whose
/// config equals the base reuse the `full` run.
pub fn run_ablations(
    records: &[Record],
    base: &TrainConfig,
    table: AblationTable,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(table, base);
    let distinct: Vec<usize> = (0..variants.len())
        .filter(|&i| i == 0 || variants[i].1 != *base)
        .collect();
    let runs = run_jobs(distinct.len(), jobs, |j| {
        let (name, cfg) = &variants[distinct[j]];
        let dir = cell_dir(out_dir, &slug(name));
        Ok(run_two_stage(records, cfg, dir.as_deref())?.summary)
    })?;
    let full = &runs[0];
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|(name, cfg)| {
            let s = if cfg == base {
                full
            } else {
                let j = distinct
                    .iter()
                    .position(|&i| variants[i].0 == *name)
                    .expect("variant ran");
                &runs[j]
            };
            ablation_row(name, s, Some(full))
        })
        .collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant,val_rouge_l,val_accuracy,test_accuracy,delta_val_rouge_l,delta_test_accuracy\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.name,
            r.val_rouge_l,
            r.val_accuracy,
            r.test_accuracy,
            r.delta_val_rouge_l,
            r.delta_test_accuracy
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentRole {
    Generated,
    Positive,
    Softneg,
}

impl LatentRole {
    pub fn name(self) -> &'static str {
        match self {
            Self::Generated => "generated",
            Self::Positive => "positive",
            Self::Softneg => "softneg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatentRow {
    pub id: String,
    pub role: LatentRole,
    pub method: Option<Method>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LatentExport {
    pub rows: Vec<LatentRow>,
}

impl LatentExport {
    /// `id  role  method  h_0 … h_{d−1}`, tab separated; method is `-`
    /// outside soft negatives.
    pub fn to_tsv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.h.len());
        let mut s = String::from("id\trole\tmethod");
        for i in 0..d {
            let _ = write!(s, "\th_{i}");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.id);
            s.push('\t');
            s.push_str(r.role.name());
            s.push('\t');
            s.push_str(r.method.map_or("-", Method::name));
            for x in &r.h {
                let _ = write!(s, "\t{x}");
            }
            s.push('\n');
        }
        s
    }
}

fn embedding_of(f: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, f);
    let h = embed_rationale(&mut g, &p, tokens)?;
    Ok(g.value(h).data().to_vec())
}

/// Generated-sample embedding: the greedy rationale is teacher-forced
/// back through `f` and its logits pooled as in training.
fn generated_latent(
    f: &ModelParams,
    record: &Record,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let text = generate_rationale(f, record, vocab, cfg)?;
    let mut target = rationale_ids(vocab, &text);
    target.truncate(cfg.max_gen_rationale);
    target.push(EOS);
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, f);
    let input = build_rationale_input(record, vocab, cfg.max_len_rationale);
    let h_enc = encode(&mut g, &p, &input, vision_of(record, cfg))?;
    let nll = decode_nll(&mut g, &p, h_enc, &target)?;
    let body = g.slice_rows(nll.logits, 0, target.len() - 1)?;
    let h = generated_embedding(&mut g, &p, body, cfg.bml_mode)?;
    Ok(g.value(h).data().to_vec())
}

/// Latent rows for `n` records drawn with `seed`: the generated rationale,
/// the gold positive and each epoch-0 soft negative.
pub fn export_latents(
    records: &[Record],
    f: &ModelParams,
    vocab: &Vocab,
    lexicons: &Lexicons,
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<LatentExport> {
    if n > records.len() {
        return Err(Error::Config(format!(
            "asked for {n} records, corpus has {}",
            records.len()
        )));
    }
    let mut picked = sample(&mut ChaCha8Rng::seed_from_u64(seed), records.len(), n).into_vec();
    picked.sort_unstable();
    let sampler = cfg.sampler();
    let mut out = LatentExport::default();
    for i in picked {
        let r = &records[i];
        out.rows.push(LatentRow {
            id: r.id.clone(),
            role: LatentRole::Generated,
            method: None,
            h: generated_latent(f, r, vocab, cfg)?,
        });
        let target = rationale_target(r, vocab, cfg);
        out.rows.push(LatentRow {
            id: r.id.clone(),
            role: LatentRole::Positive,
            method: None,
            h: embedding_of(f, &target[..target.len() - 1])?,
        });
        for neg in sample_soft_negatives(r, lexicons, &sampler, 0) {
            let mut ids = rationale_ids(vocab, &neg.text);
            ids.truncate(cfg.max_gen_rationale);
            out.rows.push(LatentRow {
                id: r.id.clone(),
                role: LatentRole::Softneg,
                method: Some(neg.method),
                h: embedding_of(f, &ids)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_has_56_live_cells() {
        let cells = grid_cells(&SweepSpec::standard(TrainConfig::default())).unwrap();
        assert_eq!(cells.len(), 64);
        assert_eq!(cells.iter().filter(|c| c.skip.is_none()).count(), 56);
        assert!(cells
            .iter()
            .filter(|c| c.beta == BETA_WILDCARD)
            .all(|c| c.skip.is_none()));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut spec = SweepSpec::standard(TrainConfig::default());
        spec.alpha_set.clear();
        assert!(matches!(grid_cells(&spec), Err(Error::Config(_))));
        assert!(SweepSpec::preset("tiny", TrainConfig::default()).is_err());
    }

    #[test]
    fn variants_change_one_flag() {
        let base = TrainConfig::default();
        let v = ablation_variants(AblationTable::Transforms, &base);
        assert_eq!(v.len(), 6);
        assert!(v[4].1.disable_option && !v[4].1.disable_unit);
        assert!(v[5].1.fixed_negatives);
        let m = ablation_variants(AblationTable::Mods, &base);
        assert_eq!(m[1].1, base);
        assert_eq!(m[4].1.mods, Mods::All);
        assert!(AblationTable::from_number(4).is_err());
    }

    #[test]
    fn jobs_keep_order() {
        let out = run_jobs(10, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(out, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
