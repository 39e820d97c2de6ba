use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use softneg_core::corpus::{load_corpus, split_of, synth_corpus, write_corpus, Record, Split};
use softneg_core::harness::{export_latents, grid_sweep, run_ablations, AblationTable, SweepSpec};
use softneg_core::model::{load_checkpoint, save_checkpoint};
use softneg_core::pipeline::config::RationaleSource;
use softneg_core::pipeline::train::{
    build_vocab, evaluate, generate_rationales, load_lexicons, load_rationales, rationales_jsonl,
    run_two_stage, train_answer_stage, train_rationale_stage,
};
use softneg_core::pipeline::{infer_two_stage, TrainConfig};
use softneg_core::sampler::{
    sample_soft_negatives, Lexicons, Method, Mods, NegativeRow, SamplerConfig,
};

#[derive(Parser)]
#[command(
    name = "softneg",
    version,
    about = "Two-stage rationale/answer training with soft negatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// flat `key = value` config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// extra `key=value` overrides applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// rationale model checkpoint
    #[arg(long)]
    f: PathBuf,
    /// answer model checkpoint
    #[arg(long)]
    g: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample soft negatives for every record.
    GenNegatives {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long)]
        fixed: bool,
        /// 1, 2, 3 or all
        #[arg(long, default_value = "1")]
        mods: String,
        /// comma-separated: number,orientation,unit,option
        #[arg(long, value_delimiter = ',')]
        disable: Vec<String>,
    },
    /// Train the rationale model.
    TrainRationale(RunArgs),
    /// Train the answer model.
    TrainAnswer {
        #[command(flatten)]
        run: RunArgs,
        /// generated rationales (JSONL) used for evaluation, and for
        /// training when `answer_rationale = generated`
        #[arg(long)]
        rationales: Option<PathBuf>,
    },
    /// Both stages end to end, then evaluation.
    Run(RunArgs),
    /// Two-stage predictions for one split.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Scores saved models on every split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Hyperparameter grid.
    Sweep {
        #[arg(long, default_value = "standard")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Ablation table: 2 (transforms), 3 (modifications), 6 (vision).
    Ablate {
        #[arg(long)]
        table: u32,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Latent vectors of generated, gold and soft-negative rationales.
    ExportLatents {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        f: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        corpus: PathBuf,
        /// TSV output file
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override {kv:?} is not key=value");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(args: &RunArgs) -> Result<(TrainConfig, Vec<Record>)> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let records =
        load_corpus(&args.corpus).with_context(|| format!("corpus {}", args.corpus.display()))?;
    if records.is_empty() {
        bail!("corpus {} is empty", args.corpus.display());
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.txt"), cfg.to_kv())?;
    Ok((cfg, records))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_negatives(
    input: &Path,
    out: &Path,
    seed: u64,
    epoch: usize,
    fixed: bool,
    mods: &str,
    disable: &[String],
) -> Result<()> {
    let records = load_corpus(input)?;
    let cfg = SamplerConfig {
        seed,
        fixed_negatives: fixed,
        mods: mods.parse::<Mods>()?,
        disabled: disable
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<softneg_core::Result<_>>()?,
    };
    let lx = Lexicons::builtin();
    let mut body = String::new();
    let mut n = 0;
    for r in &records {
        for neg in sample_soft_negatives(r, &lx, &cfg, epoch) {
            body += &serde_json::to_string(&NegativeRow::new(&r.id, &neg))?;
            body.push('\n');
            n += 1;
        }
    }
    fs::write(out, body)?;
    info!("{n} negatives for {} records", records.len());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { n, seed, out } => {
            write_corpus(&out, &synth_corpus(n, seed)?)?;
        }
        Command::GenNegatives {
            input,
            out,
            seed,
            epoch,
            fixed,
            mods,
            disable,
        } => gen_negatives(&input, &out, seed, epoch, fixed, &mods, &disable)?,
        Command::TrainRationale(args) => {
            let (cfg, records) = prepare(&args)?;
            let lx = load_lexicons(&cfg)?;
            let vocab = build_vocab(&records, &lx);
            let stage = train_rationale_stage(&records, &vocab, &lx, &cfg)?;
            fs::write(args.out.join("rationale_metrics.csv"), stage.log.to_csv())?;
            write_json(&args.out.join("summary.json"), &stage.log)?;
            save_checkpoint(&args.out.join("f.ckpt"), &stage.params, &vocab)?;
            let generated = generate_rationales(&stage.params, &records, &vocab, &cfg)?;
            fs::write(
                args.out.join("rationales.jsonl"),
                rationales_jsonl(&generated)?,
            )?;
            println!(
                "best epoch {} val rouge-l {:.4}",
                stage.log.best_epoch, stage.log.best_metric
            );
        }
        Command::TrainAnswer { run, rationales } => {
            let (cfg, records) = prepare(&run)?;
            let lx = load_lexicons(&cfg)?;
            let vocab = build_vocab(&records, &lx);
            let generated = rationales.as_deref().map(load_rationales).transpose()?;
            let train_source = match (cfg.answer_rationale, &generated) {
                (RationaleSource::Gold, _) => None,
                (RationaleSource::Generated, Some(map)) => Some(map),
                (RationaleSource::Generated, None) => {
                    bail!("answer_rationale = generated needs --rationales")
                }
            };
            let stage =
                train_answer_stage(&records, &vocab, train_source, generated.as_ref(), &cfg)?;
            fs::write(run.out.join("answer_metrics.csv"), stage.log.to_csv())?;
            write_json(&run.out.join("summary.json"), &stage.log)?;
            save_checkpoint(&run.out.join("g.ckpt"), &stage.params, &vocab)?;
            println!(
                "best epoch {} val accuracy {:.4}",
                stage.log.best_epoch, stage.log.best_metric
            );
        }
        Command::Run(args) => {
            let (cfg, records) = prepare(&args)?;
            let run = run_two_stage(&records, &cfg, Some(&args.out))?;
            let s = &run.summary;
            println!(
                "val rouge-l {:.4} val accuracy {:.4} test accuracy {:.4}",
                s.val.rouge_l, s.val.accuracy, s.test.accuracy
            );
        }
        Command::Infer { run, models, split } => {
            let (cfg, records) = prepare(&run)?;
            let split = parse_split(&split)?;
            let (f, vocab) = load_checkpoint(&models.f)?;
            let (g, _) = load_checkpoint(&models.g)?;
            let mut body = String::new();
            let mut correct = 0;
            let chosen = split_of(&records, split);
            for r in &chosen {
                let inf = infer_two_stage(r, &f, &g, &vocab, &cfg)?;
                let ok = inf.parsed && inf.index == r.answer_index;
                correct += ok as usize;
                body += &serde_json::to_string(&serde_json::json!({
                    "id": r.id,
                    "rationale": inf.rationale,
                    "answer_text": inf.answer_text,
                    "index": inf.index,
                    "parsed": inf.parsed,
                    "correct": ok,
                }))?;
                body.push('\n');
            }
            fs::write(run.out.join("predictions.jsonl"), body)?;
            println!("{correct}/{} correct", chosen.len());
        }
        Command::Eval { run, models } => {
            let (cfg, records) = prepare(&run)?;
            let (f, vocab) = load_checkpoint(&models.f)?;
            let (g, _) = load_checkpoint(&models.g)?;
            let (report, generated) = evaluate(&records, &f, &g, &vocab, &cfg)?;
            write_json(&run.out.join("eval.json"), &report)?;
            fs::write(
                run.out.join("rationales.jsonl"),
                rationales_jsonl(&generated)?,
            )?;
            for (name, s) in [
                ("train", &report.train),
                ("val", &report.val),
                ("test", &report.test),
            ] {
                println!(
                    "{name}: n {} accuracy {:.4} rouge-l {:.4} unparsed {}",
                    s.count, s.accuracy, s.rouge_l, s.unparsed
                );
            }
        }
        Command::Sweep {
            preset,
            repetitions,
            jobs,
            run,
        } => {
            let (cfg, records) = prepare(&run)?;
            let spec = SweepSpec {
                repetitions,
                ..SweepSpec::preset(&preset, cfg)?
            };
            let rows = grid_sweep(&spec, &records, Some(&run.out), jobs)?;
            let done = rows.iter().filter(|r| r.cell.skip.is_none()).count();
            println!("{done} cells run, {} skipped", rows.len() - done);
        }
        Command::Ablate { table, jobs, run } => {
            let table = AblationTable::from_number(table)?;
            let (cfg, records) = prepare(&run)?;
            for row in run_ablations(&records, &cfg, table, Some(&run.out), jobs)? {
                println!(
                    "{:<18} val rouge-l {:.4} test accuracy {:.4} ({:+.4})",
                    row.name, row.val_rouge_l, row.test_accuracy, row.delta_test_accuracy
                );
            }
        }
        Command::ExportLatents {
            n,
            seed,
            f,
            config,
            overrides,
            corpus,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let records = load_corpus(&corpus)?;
            let (params, vocab) = load_checkpoint(&f)?;
            let lx = load_lexicons(&cfg)?;
            let export = export_latents(&records, &params, &vocab, &lx, &cfg, n, seed)?;
            fs::write(&out, export.to_tsv())?;
            println!("{} rows", export.rows.len());
        }
    }
    Ok(())
}
