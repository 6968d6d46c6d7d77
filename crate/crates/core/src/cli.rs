//! Command-line front end. Every command writes its resolved configuration
//! next to its outputs; rerunning from that file reproduces them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{generate_corpus, Corpus};
use crate::encoder::{Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, rejection_auc, relative_improvement, EvalReport, TrialParams};
use crate::losses::EmbeddingBatch;
use crate::rejection::{compactness, soft_weights, RejectionConfig, RejectionMode, RejectionRecord};
use crate::trainer::{embed_dialogues, finetune, pretrain, write_metrics_csv, TrainMode, TrainOutcome};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dialogue-sid", version, about = "Speaker embeddings pretrained on dialogues")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dialogue corpus.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining with dialogues as classes.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Use a saved corpus instead of generating one from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Train once per batch size and write a relative-EER summary.
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
    },
    /// Supervised fine-tuning with speakers as classes.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint; also trains a from-scratch baseline for comparison.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Speaker-verification EER of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also score how well rejection weights separate contaminated dialogues.
        #[arg(long)]
        diagnose_rejection: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        Error::Config(_) | Error::Shape { .. } | Error::Json(_) | Error::BatchSkipped { .. } => EXIT_CONFIG,
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => cmd_gen_corpus(&config, &out),
        Command::Pretrain {
            config,
            corpus,
            batch_sizes,
        } => cmd_pretrain(&config, corpus.as_deref(), batch_sizes.as_deref()),
        Command::Finetune { config, init, corpus } => cmd_finetune(&config, init.as_deref(), corpus.as_deref()),
        Command::Eval {
            checkpoint,
            corpus,
            config,
            out,
            diagnose_rejection,
        } => cmd_eval(&checkpoint, corpus.as_deref(), config.as_deref(), &out, diagnose_rejection),
    }
}

/// `corpus.jsonl` → `corpus.config.json`.
pub fn echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn load_or_generate(cfg: &mut ExperimentConfig, corpus: Option<&Path>) -> Result<Corpus> {
    match corpus {
        Some(p) => {
            let c = Corpus::load(p)?;
            cfg.corpus = c.spec;
            Ok(c)
        }
        None => generate_corpus(&cfg.corpus),
    }
}

pub fn cmd_gen_corpus(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?.resolved();
    let corpus = generate_corpus(&cfg.corpus)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    corpus.save(out)?;
    cfg.save(&echo_path(out))
}

fn write_outcome(dir: &Path, out: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.best.save(&dir.join("best.ckpt.json"))?;
    out.last.save(&dir.join("last.ckpt.json"))?;
    write_metrics_csv(&out.log, BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    if !out.diagnostics.is_empty() {
        write_diagnostics(&out.diagnostics, &dir.join("diagnostics.jsonl"))?;
    }
    Ok(())
}

fn write_diagnostics(records: &[RejectionRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGridEntry {
    pub batch_size: usize,
    pub best_val_eer: Option<f64>,
    /// `(EER_smallest − EER_this) / EER_smallest`.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGridSummary {
    pub baseline_batch_size: usize,
    pub runs: Vec<BatchGridEntry>,
}

pub fn cmd_pretrain(config: &Path, corpus: Option<&Path>, batch_sizes: Option<&[usize]>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if cfg.train.mode != TrainMode::Pretrain {
        return Err(Error::config("pretrain needs train.mode = \"pretrain\""));
    }
    let data = load_or_generate(&mut cfg, corpus)?;
    let cfg = cfg.resolved();
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("effective_config.json"))?;

    let Some(sizes) = batch_sizes else {
        return write_outcome(out_dir, &pretrain(&cfg.train, &data)?);
    };
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let Some(&baseline) = sizes.first() else {
        return Err(Error::config("--batch-sizes is empty"));
    };
    let mut results = Vec::new();
    for &n in &sizes {
        let mut train = cfg.train.clone();
        train.batch.n = n;
        let out = pretrain(&train, &data)?;
        write_outcome(&out_dir.join(format!("batch_{n}")), &out)?;
        results.push((n, out.best_val_eer));
    }
    let base_eer = results[0].1;
    let runs = results
        .into_iter()
        .map(|(n, eer)| BatchGridEntry {
            batch_size: n,
            best_val_eer: eer,
            relative_improvement: base_eer.zip(eer).and_then(|(b, e)| relative_improvement(b, e)),
        })
        .collect();
    write_json(
        &out_dir.join("summary.json"),
        &BatchGridSummary {
            baseline_batch_size: baseline,
            runs,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pretrained_eer: f64,
    pub scratch_eer: f64,
    /// `(EER_scratch − EER_pretrained) / EER_scratch`.
    pub relative_improvement: Option<f64>,
}

/// EER of `encoder` on the trailing held-out dialogues of `corpus`.
pub fn held_out_eer(encoder: &EncoderParams, corpus: &Corpus, fraction: f64, trials: &TrialParams) -> Result<f64> {
    let (_, held) = corpus.split_held_out(fraction)?;
    let held = if held.is_empty() { (0..corpus.len()).collect() } else { held };
    embed_dialogues(encoder, corpus, &held)?.eer(trials)
}

pub fn cmd_finetune(config: &Path, init: Option<&Path>, corpus: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if cfg.train.mode != TrainMode::Finetune {
        return Err(Error::config("finetune needs train.mode = \"finetune\""));
    }
    let data = load_or_generate(&mut cfg, corpus)?;
    let cfg = cfg.resolved();
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("effective_config.json"))?;

    let Some(init) = init else {
        return write_outcome(out_dir, &finetune(&cfg.train, &data, None)?);
    };
    let init = Checkpoint::load(init)?;
    let tuned = finetune(&cfg.train, &data, Some(&init.encoder))?;
    write_outcome(out_dir, &tuned)?;
    let scratch = finetune(&cfg.train, &data, None)?;
    write_outcome(&out_dir.join("scratch"), &scratch)?;

    let frac = cfg.train.held_out_fraction;
    let pretrained_eer = held_out_eer(&tuned.best.encoder, &data, frac, &cfg.train.validation)?;
    let scratch_eer = held_out_eer(&scratch.best.encoder, &data, frac, &cfg.train.validation)?;
    write_json(
        &out_dir.join("report.json"),
        &FinetuneReport {
            pretrained_eer,
            scratch_eer,
            relative_improvement: relative_improvement(scratch_eer, pretrained_eer),
        },
    )
}

/// Soft rejection weights of every dialogue under a checkpoint's threshold and temperature.
pub fn dialogue_weights(ck: &Checkpoint, corpus: &Corpus) -> Result<Vec<f64>> {
    let utts: Vec<_> = corpus.dialogues.iter().flat_map(|d| d.utterances.iter()).collect();
    let emb = ck.encoder.encode_batch(&utts)?;
    let batch = EmbeddingBatch::new(corpus.len(), corpus.spec.utterances_per_dialogue, emb)?;
    let c = compactness(&batch);
    let cfg = RejectionConfig {
        mode: RejectionMode::Soft,
        threshold: ck.threshold,
        temperature: ck.temperature,
        temperature_learnable: false,
    };
    Ok(soft_weights(&c, &cfg, &vec![0.0; c.len()])?.weights)
}

pub fn evaluate_checkpoint(ck: &Checkpoint, corpus: &Corpus, trials: &TrialParams, diagnose: bool) -> Result<EvalReport> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    let e = embed_dialogues(&ck.encoder, corpus, &all)?;
    let eer = evaluate_embeddings(&e.embeddings, &e.speakers, &e.dialogues, trials)?;
    let auc = if diagnose {
        let flags: Vec<bool> = corpus.dialogues.iter().map(|d| d.is_contaminated).collect();
        Some(rejection_auc(&dialogue_weights(ck, corpus)?, &flags)?)
    } else {
        None
    };
    Ok(EvalReport::new(&eer, auc))
}

pub fn cmd_eval(checkpoint: &Path, corpus: Option<&Path>, config: Option<&Path>, out: &Path, diagnose: bool) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None if corpus.is_some() => ExperimentConfig::default(),
        None => return Err(Error::config("eval needs --corpus or --config")),
    };
    let data = load_or_generate(&mut cfg, corpus)?;
    let cfg = cfg.resolved();
    let ck = Checkpoint::load(checkpoint)?;
    let report = evaluate_checkpoint(&ck, &data, &cfg.eval, diagnose)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(out, &report)?;
    cfg.save(&echo_path(out))
}
