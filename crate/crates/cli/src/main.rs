//! `relemb`: experiment driver for the relation embedding toolkit.
//!
//! One command per pipeline stage: pretrain, finetune, evaluate, mine-pairs,
//! probe-mask, few-shot. Options come from flags or a `key: value` config
//! file (`--config`); flags win. Every run writes a manifest recording the
//! resolved config and SHA-256 digests of the artifacts it produced.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 runtime error (partial
//! artifacts are removed).

mod config;
mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use relemb::corpus::{self, AnnotatedExample};
use relemb::encoder::{EncoderConfig, FrozenEncoderProvider, Strategy};
use relemb::metrics;
use relemb::objectives::SelfSupervisedPairs;
use relemb::pairminer::{self, MinerConfig};
use relemb::tokens::{MaskingKind, MaskingStrategy, Vocabulary};
use relemb::trainer::{
    finetune, load_checkpoint, pretrain, predict_with_checkpoint, save_checkpoint,
    train_entity_provider, Checkpoint, FinetuneFrom, FinetuneOutcome, PretrainData,
    PretrainOutcome, SelectionMetric, TrainConfig,
};

use config::{parse_label_list, parse_usize_list, Cfg};
use manifest::ArtifactTracker;

#[derive(Parser)]
#[command(name = "relemb", version, about = "relation embedding toolkit")]
struct Cli {
    /// Declarative key:value config file; every key matches a flag name.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a relation encoder with InfoNCE + MLM.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier (and encoder) on labeled data.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint and write a report.
    Evaluate(EvaluateArgs),
    /// Mine self-supervised positive pairs from coreference documents.
    MinePairs(MinePairsArgs),
    /// Rank vocabulary tokens the MLM head predicts at the prompt [MASK].
    ProbeMask(ProbeMaskArgs),
    /// Emit per-class subsampled datasets for few-shot experiments.
    FewShot(FewShotArgs),
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self, cfg: &Cfg) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epochs: cfg.get("epochs", self.epochs, d.epochs)?,
            lr: cfg.get("lr", self.lr, d.lr)?,
            weight_decay: cfg.get("weight-decay", self.weight_decay, d.weight_decay)?,
            batch_size: cfg.get("batch-size", self.batch_size, d.batch_size)?,
            seed: cfg.get("seed", self.seed, d.seed)?,
            max_len: cfg.get("max-len", self.max_len, d.max_len)?,
            temperature: cfg.get("temperature", self.temperature, d.temperature)?,
            hidden_dim: None,
            selection: SelectionMetric::MicroF1,
        })
    }
}

#[derive(Args)]
struct EncoderFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
}

impl EncoderFlags {
    fn resolve(&self, cfg: &Cfg, vocab_size: usize, max_len: usize, seed: u64) -> Result<EncoderConfig> {
        let dim = cfg.get("dim", self.dim, 64)?;
        let mut enc = EncoderConfig::new(
            cfg.get("layers", self.layers, 2)?,
            cfg.get("heads", self.heads, 4)?,
            dim,
            vocab_size,
            max_len,
            seed,
        );
        enc.ff_dim = cfg.get("ff-dim", self.ff_dim, 4 * dim)?;
        Ok(enc)
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Labeled JSONL dataset (supervised pairing).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mined pairs file (self-supervised pairing); exclusive with --data.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Validation set of the same kind; defaults to a seeded holdout split.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// ht | mask | ht-mask | ht+mask | cls | ht-cls | ht+cls | entity-provider
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    masking: Option<String>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    encoder: EncoderFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Pre-trained checkpoint to start from; omit with --from-scratch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from a fresh encoder (the no-pre-training arm).
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    strategy: Option<String>,
    /// Frozen entity-embedding provider checkpoint (EnCore strategies).
    #[arg(long)]
    provider: Option<PathBuf>,
    /// Classifier hidden width; defaults to the encoder dim.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// micro-f1 | p-at-k
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    encoder: EncoderFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    provider: Option<PathBuf>,
    /// Directory receiving report.txt, per_example.tsv, confusion.csv.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Ranking cutoffs for precision@k, comma separated.
    #[arg(long)]
    p_at_k: Option<String>,
    /// Focus labels for an additional confusion matrix with an "other" bucket.
    #[arg(long)]
    focus: Option<String>,
    /// Another run's per_example.tsv to compare errors against.
    #[arg(long)]
    compare_with: Option<PathBuf>,
}

#[derive(Args)]
struct MinePairsArgs {
    /// Coreference documents, one JSON object per line.
    #[arg(long)]
    docs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_per_key: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drop_pronouns: bool,
}

#[derive(Args)]
struct ProbeMaskArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Example id to probe; defaults to the first record.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Optional TSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shots per relation, comma separated (e.g. "4,16,32").
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match &cli.config {
        Some(path) => match Cfg::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("config error: {e:#}");
                return 1;
            }
        },
        None => Cfg::empty(),
    };
    let mut tracker = ArtifactTracker::new();
    match run(&cli.command, &cfg, &mut tracker) {
        Ok(RunOutcome::Done) => 0,
        Ok(RunOutcome::UsageError(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            tracker.remove_all();
            2
        }
    }
}

enum RunOutcome {
    Done,
    UsageError(String),
}

fn run(command: &Command, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
    // resolve + validate first: schema problems must not start a run
    match command {
        Command::Pretrain(args) => match PretrainPlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
        Command::Finetune(args) => match FinetunePlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
        Command::Evaluate(args) => match EvaluatePlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
        Command::MinePairs(args) => match MinePairsPlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
        Command::ProbeMask(args) => match ProbeMaskPlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
        Command::FewShot(args) => match FewShotPlan::resolve(args, cfg) {
            Ok(plan) => plan.execute(cfg, tracker),
            Err(e) => Ok(RunOutcome::UsageError(format!("{e:#}"))),
        },
    }
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{what} path {} does not exist", path.display());
    }
    Ok(path)
}

fn vocab_from_examples(sets: &[&[AnnotatedExample]]) -> Result<Vocabulary> {
    let mut texts = Vec::new();
    for set in sets {
        for ex in *set {
            texts.push(corpus::build_annotated_text(ex)?);
        }
    }
    Ok(Vocabulary::from_texts(texts.iter()))
}

fn masking_from(cfg: &Cfg, kind_flag: &Option<String>, rate_flag: Option<f64>) -> Result<MaskingStrategy> {
    let kind_raw = cfg.get("masking", kind_flag.clone(), "random-tokens".to_string())?;
    let kind: MaskingKind = kind_raw.parse()?;
    let rate = cfg.get("mask-rate", rate_flag, 0.15)?;
    let strat = MaskingStrategy { kind, rate };
    strat.validate()?;
    Ok(strat)
}

// ---------------------------------------------------------------------------
// pretrain

enum PretrainInput {
    Supervised {
        train: Vec<AnnotatedExample>,
        valid: Vec<AnnotatedExample>,
    },
    SelfSupervised {
        train: SelfSupervisedPairs,
        valid: SelfSupervisedPairs,
    },
}

struct PretrainPlan {
    input: PretrainInput,
    strategy_tag: String,
    train_cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    masking: MaskingStrategy,
    vocab: Vocabulary,
    out: PathBuf,
}

impl PretrainPlan {
    fn resolve(args: &PretrainArgs, cfg: &Cfg) -> Result<Self> {
        let data = cfg.get_opt("data", args.data.clone())?;
        let pairs = cfg.get_opt("pairs", args.pairs.clone())?;
        let valid_path = cfg.get_opt("valid", args.valid.clone())?;
        let valid_fraction = cfg.get("valid-fraction", args.valid_fraction, 0.1)?;
        let strategy_tag: String = cfg.require("strategy", args.strategy.clone())?;
        if strategy_tag != "entity-provider" {
            let strategy: Strategy = strategy_tag.parse()?;
            if !strategy.pretrainable() {
                bail!("strategy {strategy} skips pre-training; run finetune with --provider instead");
            }
        }
        let train_cfg = args.train.resolve(cfg)?;
        let masking = masking_from(cfg, &args.masking, args.mask_rate)?;
        let out: PathBuf = cfg.require("out", args.out.clone())?;

        let (input, vocab) = match (data, pairs) {
            (Some(_), Some(_)) => bail!("--data and --pairs are mutually exclusive"),
            (None, None) => bail!("pretrain needs --data or --pairs"),
            (Some(data), None) => {
                let data = existing(data, "data")?;
                let (examples, _) = corpus::load_dataset(&data)?;
                let (train, valid) = match valid_path {
                    Some(v) => {
                        let v = existing(v, "valid")?;
                        (examples, corpus::load_dataset(&v)?.0)
                    }
                    None => {
                        let (ti, vi) =
                            corpus::holdout_split(examples.len(), valid_fraction, train_cfg.seed)?;
                        pick(&examples, &ti, &vi)
                    }
                };
                let vocab = vocab_from_examples(&[&train, &valid])?;
                (PretrainInput::Supervised { train, valid }, vocab)
            }
            (None, Some(pairs_path)) => {
                let pairs_path = existing(pairs_path, "pairs")?;
                let mined = pairminer::read_pairs(&pairs_path)?;
                let (train_mined, valid_mined) = match valid_path {
                    Some(v) => {
                        let v = existing(v, "valid")?;
                        (mined, pairminer::read_pairs(&v)?)
                    }
                    None => {
                        let (ti, vi) =
                            corpus::holdout_split(mined.len(), valid_fraction, train_cfg.seed)?;
                        pick(&mined, &ti, &vi)
                    }
                };
                let train = SelfSupervisedPairs::from_mined(&train_mined)?;
                let valid = SelfSupervisedPairs::from_mined(&valid_mined)?;
                let vocab = vocab_from_examples(&[&train.examples, &valid.examples])?;
                (PretrainInput::SelfSupervised { train, valid }, vocab)
            }
        };
        let enc_cfg = args
            .encoder
            .resolve(cfg, vocab.len(), train_cfg.max_len, train_cfg.seed)?;
        cfg.ensure_all_used()?;
        Ok(PretrainPlan {
            input,
            strategy_tag,
            train_cfg,
            enc_cfg,
            masking,
            vocab,
            out,
        })
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let outcome: PretrainOutcome<f64> = match (&self.input, self.strategy_tag.as_str()) {
            (PretrainInput::Supervised { train, valid }, "entity-provider") => {
                train_entity_provider(
                    train,
                    valid,
                    &self.enc_cfg,
                    &self.train_cfg,
                    self.masking,
                    &self.vocab,
                )?
            }
            (PretrainInput::SelfSupervised { .. }, "entity-provider") => {
                bail!("entity-provider training expects labeled --data, not --pairs")
            }
            (input, tag) => {
                let strategy: Strategy = tag.parse()?;
                let (train, valid) = match input {
                    PretrainInput::Supervised { train, valid } => (
                        PretrainData::Supervised(train),
                        PretrainData::Supervised(valid),
                    ),
                    PretrainInput::SelfSupervised { train, valid } => (
                        PretrainData::SelfSupervised(train),
                        PretrainData::SelfSupervised(valid),
                    ),
                };
                pretrain(
                    train,
                    valid,
                    strategy,
                    &self.enc_cfg,
                    &self.train_cfg,
                    self.masking,
                    &self.vocab,
                )?
            }
        };

        save_checkpoint(&outcome.checkpoint, &self.out)?;
        tracker.note(&self.out);
        let log_path = tracker.sibling(&self.out, "log.tsv");
        let mut log = String::from("epoch\ttrain_total\tval_total\tval_info\tval_mlm\n");
        for e in &outcome.log {
            let train = e
                .train_total
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            log.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                e.epoch, train, e.val_total, e.val_info, e.val_mlm
            ));
        }
        tracker.write(&log_path, log.as_bytes())?;
        manifest::write(
            &tracker.sibling(&self.out, "manifest.json"),
            "pretrain",
            cfg,
            tracker,
        )?;
        println!(
            "pretrain done: strategy={} epoch={} val={:.6} -> {}",
            self.strategy_tag,
            outcome.checkpoint.meta.epoch,
            outcome.checkpoint.meta.validation_score,
            self.out.display()
        );
        Ok(RunOutcome::Done)
    }
}

fn pick<T: Clone>(items: &[T], a: &[usize], b: &[usize]) -> (Vec<T>, Vec<T>) {
    (
        a.iter().map(|&i| items[i].clone()).collect(),
        b.iter().map(|&i| items[i].clone()).collect(),
    )
}

// ---------------------------------------------------------------------------
// finetune

struct FinetunePlan {
    train: Vec<AnnotatedExample>,
    valid: Vec<AnnotatedExample>,
    from_checkpoint: Option<PathBuf>,
    strategy: Strategy,
    provider: Option<PathBuf>,
    train_cfg: TrainConfig,
    enc_flags_resolved: Option<EncoderConfig>,
    out: PathBuf,
}

impl FinetunePlan {
    fn resolve(args: &FinetuneArgs, cfg: &Cfg) -> Result<Self> {
        let data = existing(cfg.require("data", args.data.clone())?, "data")?;
        let (examples, _) = corpus::load_dataset(&data)?;
        let train_cfg_base = args.train.resolve(cfg)?;
        let valid_fraction = cfg.get("valid-fraction", args.valid_fraction, 0.1)?;
        let (train, valid) = match cfg.get_opt("valid", args.valid.clone())? {
            Some(v) => {
                let v = existing(v, "valid")?;
                (examples, corpus::load_dataset(&v)?.0)
            }
            None => {
                let (ti, vi) =
                    corpus::holdout_split(examples.len(), valid_fraction, train_cfg_base.seed)?;
                pick(&examples, &ti, &vi)
            }
        };

        let strategy: Strategy = cfg.require::<String>("strategy", args.strategy.clone())?.parse()?;
        let from_scratch = cfg.get("from-scratch", args.from_scratch.then_some(true), false)?;
        let checkpoint = cfg.get_opt("checkpoint", args.checkpoint.clone())?;
        let from_checkpoint = match (checkpoint, from_scratch, strategy) {
            (Some(_), true, _) => bail!("--checkpoint and --from-scratch are mutually exclusive"),
            (None, false, Strategy::Encore) => None, // EnCore uses no pre-training
            (None, false, _) => {
                bail!("finetune needs --checkpoint or --from-scratch")
            }
            (ck, _, _) => ck.map(|c| existing(c, "checkpoint")).transpose()?,
        };
        let provider = cfg
            .get_opt("provider", args.provider.clone())?
            .map(|p| existing(p, "provider"))
            .transpose()?;
        if strategy.uses_provider() && provider.is_none() {
            bail!("strategy {strategy} requires --provider");
        }

        let mut train_cfg = train_cfg_base;
        train_cfg.hidden_dim = cfg.get_opt("hidden-dim", args.hidden_dim)?;
        train_cfg.selection = match cfg
            .get("selection", args.selection.clone(), "micro-f1".to_string())?
            .as_str()
        {
            "micro-f1" => SelectionMetric::MicroF1,
            "p-at-k" => SelectionMetric::MeanPrecisionAtK,
            other => bail!("unknown selection metric {other:?}"),
        };

        let enc_flags_resolved = if from_checkpoint.is_none() {
            let vocab = vocab_from_examples(&[&train, &valid])?;
            Some(
                args.encoder
                    .resolve(cfg, vocab.len(), train_cfg.max_len, train_cfg.seed)?,
            )
        } else {
            None
        };
        let out: PathBuf = cfg.require("out", args.out.clone())?;
        cfg.ensure_all_used()?;
        Ok(FinetunePlan {
            train,
            valid,
            from_checkpoint,
            strategy,
            provider,
            train_cfg,
            enc_flags_resolved,
            out,
        })
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let from = match &self.from_checkpoint {
            Some(path) => FinetuneFrom::Checkpoint(Box::new(load_checkpoint::<f64>(path)?)),
            None => {
                let vocab = vocab_from_examples(&[&self.train, &self.valid])?;
                FinetuneFrom::Fresh {
                    encoder: self.enc_flags_resolved.clone().expect("resolved for fresh"),
                    vocab,
                }
            }
        };
        let provider_ck = self
            .provider
            .as_ref()
            .map(|p| load_checkpoint::<f64>(p))
            .transpose()?;
        let provider = provider_ck.map(|ck| FrozenEncoderProvider::new(ck.encoder));
        let outcome: FinetuneOutcome<f64> = finetune(
            from,
            &self.train,
            &self.valid,
            self.strategy,
            &self.train_cfg,
            provider
                .as_ref()
                .map(|p| p as &dyn relemb::encoder::EntityEmbeddingProvider<f64>),
        )?;

        save_checkpoint(&outcome.checkpoint, &self.out)?;
        tracker.note(&self.out);
        let log_path = tracker.sibling(&self.out, "log.tsv");
        let mut log = String::from("epoch\ttrain_loss\tval_score\n");
        for e in &outcome.log {
            let train = e
                .train_loss
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            log.push_str(&format!("{}\t{}\t{:.6}\n", e.epoch, train, e.val_score));
        }
        tracker.write(&log_path, log.as_bytes())?;
        manifest::write(
            &tracker.sibling(&self.out, "manifest.json"),
            "finetune",
            cfg,
            tracker,
        )?;
        println!(
            "finetune done: strategy={} epoch={} val={:.6} -> {}",
            self.strategy,
            outcome.checkpoint.meta.epoch,
            outcome.checkpoint.meta.validation_score,
            self.out.display()
        );
        Ok(RunOutcome::Done)
    }
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluatePlan {
    data: PathBuf,
    checkpoint: PathBuf,
    provider: Option<PathBuf>,
    report_dir: PathBuf,
    ks: Vec<usize>,
    focus: Option<Vec<String>>,
    compare_with: Option<PathBuf>,
}

impl EvaluatePlan {
    fn resolve(args: &EvaluateArgs, cfg: &Cfg) -> Result<Self> {
        let plan = EvaluatePlan {
            data: existing(cfg.require("data", args.data.clone())?, "data")?,
            checkpoint: existing(cfg.require("checkpoint", args.checkpoint.clone())?, "checkpoint")?,
            provider: cfg
                .get_opt("provider", args.provider.clone())?
                .map(|p| existing(p, "provider"))
                .transpose()?,
            report_dir: cfg.require("report-dir", args.report_dir.clone())?,
            ks: parse_usize_list(&cfg.get("p-at-k", args.p_at_k.clone(), "10,30".to_string())?)?,
            focus: cfg
                .get_opt("focus", args.focus.clone())?
                .map(|f| parse_label_list(&f)),
            compare_with: cfg
                .get_opt("compare-with", args.compare_with.clone())?
                .map(|p| existing(p, "compare-with"))
                .transpose()?,
        };
        cfg.ensure_all_used()?;
        Ok(plan)
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let ck: Checkpoint<f64> = load_checkpoint(&self.checkpoint)?;
        let inventory = ck.inventory()?;
        let (examples, _) = corpus::load_dataset(&self.data)?;
        let provider_ck = self
            .provider
            .as_ref()
            .map(|p| load_checkpoint::<f64>(p))
            .transpose()?;
        let provider = provider_ck.map(|c| FrozenEncoderProvider::new(c.encoder));
        let predictions = predict_with_checkpoint(
            &ck,
            &examples,
            provider
                .as_ref()
                .map(|p| p as &dyn relemb::encoder::EntityEmbeddingProvider<f64>),
        )?;

        let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        let golds: Vec<String> = examples
            .iter()
            .map(|e| e.relation.clone().expect("loader enforces labels"))
            .collect();
        let preds: Vec<String> = predictions
            .iter()
            .map(|p| {
                inventory
                    .label(p.predicted_index)
                    .expect("prediction index in inventory")
                    .to_string()
            })
            .collect();
        let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
        let report =
            metrics::evaluate_predictions(&ids, &golds, &preds, &scores, &inventory, &self.ks)?;

        std::fs::create_dir_all(&self.report_dir)
            .with_context(|| format!("creating {}", self.report_dir.display()))?;
        let header = vec![
            ("strategy".to_string(), ck.meta.strategy.clone()),
            ("checkpoint".to_string(), self.checkpoint.display().to_string()),
            ("dataset".to_string(), self.data.display().to_string()),
            ("seed".to_string(), ck.meta.train.seed.to_string()),
        ];
        tracker.write(
            &self.report_dir.join("report.txt"),
            report.render_text(&header).as_bytes(),
        )?;
        tracker.write(
            &self.report_dir.join("per_example.tsv"),
            report.per_example_tsv().as_bytes(),
        )?;
        tracker.write(
            &self.report_dir.join("confusion.csv"),
            report.confusion.to_csv().as_bytes(),
        )?;
        if let Some(focus) = &self.focus {
            let focused = metrics::confusion_matrix(&golds, &preds, Some(focus))?;
            tracker.write(
                &self.report_dir.join("confusion_focus.csv"),
                focused.to_csv().as_bytes(),
            )?;
        }
        if let Some(other) = &self.compare_with {
            let theirs = read_per_example_tsv(other)?;
            let rows = metrics::error_comparison_tables(&report.per_example, &theirs)?;
            tracker.write(
                &self.report_dir.join("error_comparison.csv"),
                metrics::error_comparison_csv(&rows).as_bytes(),
            )?;
        }
        manifest::write(&self.report_dir.join("manifest.json"), "evaluate", cfg, tracker)?;
        println!(
            "evaluate done: micro_f1={:.6} -> {}",
            report.micro_f1,
            self.report_dir.display()
        );
        Ok(RunOutcome::Done)
    }
}

fn read_per_example_tsv(path: &Path) -> Result<Vec<metrics::PerExample>> {
    let content =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let mut parts = line.split('\t');
        let (id, gold, predicted) = (parts.next(), parts.next(), parts.next());
        match (id, gold, predicted) {
            (Some(id), Some(gold), Some(pred)) => rows.push(metrics::PerExample {
                id: id.to_string(),
                gold: gold.to_string(),
                predicted: pred.to_string(),
            }),
            _ => bail!("{}:{}: expected id\\tgold\\tpredicted", path.display(), lineno + 1),
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// mine-pairs

struct MinePairsPlan {
    docs: PathBuf,
    out: PathBuf,
    miner: MinerConfig,
}

impl MinePairsPlan {
    fn resolve(args: &MinePairsArgs, cfg: &Cfg) -> Result<Self> {
        let plan = MinePairsPlan {
            docs: existing(cfg.require("docs", args.docs.clone())?, "docs")?,
            out: cfg.require("out", args.out.clone())?,
            miner: MinerConfig {
                max_pairs_per_key: cfg.get("max-per-key", args.max_per_key, 10)?,
                seed: cfg.get("seed", args.seed, 0)?,
                drop_pronoun_mentions: cfg.get(
                    "drop-pronouns",
                    args.drop_pronouns.then_some(true),
                    false,
                )?,
            },
        };
        cfg.ensure_all_used()?;
        Ok(plan)
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let docs = pairminer::read_documents(&self.docs)?;
        let pairs = pairminer::mine_pairs_corpus(&docs, &self.miner)?;
        pairminer::write_pairs(&pairs, &self.out)?;
        tracker.note(&self.out);
        manifest::write(
            &tracker.sibling(&self.out, "manifest.json"),
            "mine-pairs",
            cfg,
            tracker,
        )?;
        println!(
            "mine-pairs done: {} documents -> {} pairs -> {}",
            docs.len(),
            pairs.len(),
            self.out.display()
        );
        Ok(RunOutcome::Done)
    }
}

// ---------------------------------------------------------------------------
// probe-mask

struct ProbeMaskPlan {
    checkpoint: PathBuf,
    data: PathBuf,
    id: Option<String>,
    top_k: usize,
    out: Option<PathBuf>,
}

impl ProbeMaskPlan {
    fn resolve(args: &ProbeMaskArgs, cfg: &Cfg) -> Result<Self> {
        let plan = ProbeMaskPlan {
            checkpoint: existing(cfg.require("checkpoint", args.checkpoint.clone())?, "checkpoint")?,
            data: existing(cfg.require("data", args.data.clone())?, "data")?,
            id: cfg.get_opt("id", args.id.clone())?,
            top_k: cfg.get("top-k", args.top_k, 10)?,
            out: cfg.get_opt("out", args.out.clone())?,
        };
        cfg.ensure_all_used()?;
        Ok(plan)
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let ck: Checkpoint<f64> = load_checkpoint(&self.checkpoint)?;
        let (examples, _) = corpus::load_dataset(&self.data)?;
        let example = match &self.id {
            Some(id) => examples
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| anyhow!("example id {id:?} not in {}", self.data.display()))?,
            None => examples
                .first()
                .ok_or_else(|| anyhow!("dataset {} is empty", self.data.display()))?,
        };
        let ranked = metrics::probe_mask_tokens(&ck, example, self.top_k)?;
        let mut tsv = String::from("token\tlogit\n");
        for (token, logit) in &ranked {
            println!("{token}\t{logit:.6}");
            tsv.push_str(&format!("{token}\t{logit:.6}\n"));
        }
        if let Some(out) = &self.out {
            tracker.write(out, tsv.as_bytes())?;
            manifest::write(&tracker.sibling(out, "manifest.json"), "probe-mask", cfg, tracker)?;
        }
        Ok(RunOutcome::Done)
    }
}

// ---------------------------------------------------------------------------
// few-shot

struct FewShotPlan {
    data: PathBuf,
    ks: Vec<usize>,
    seed: u64,
    out_dir: PathBuf,
}

impl FewShotPlan {
    fn resolve(args: &FewShotArgs, cfg: &Cfg) -> Result<Self> {
        let plan = FewShotPlan {
            data: existing(cfg.require("data", args.data.clone())?, "data")?,
            ks: parse_usize_list(&cfg.require::<String>("k", args.k.clone())?)?,
            seed: cfg.get("seed", args.seed, 0)?,
            out_dir: cfg.require("out-dir", args.out_dir.clone())?,
        };
        if plan.ks.is_empty() || plan.ks.contains(&0) {
            bail!("--k needs positive shot counts");
        }
        cfg.ensure_all_used()?;
        Ok(plan)
    }

    fn execute(self, cfg: &Cfg, tracker: &mut ArtifactTracker) -> Result<RunOutcome> {
        let (examples, inventory) = corpus::load_dataset(&self.data)?;
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        for &k in &self.ks {
            let sampled = corpus::few_shot_sample(&examples, k, self.seed)?;
            let path = self.out_dir.join(format!("few_shot_k{k}_seed{}.jsonl", self.seed));
            corpus::save_dataset(&sampled, &path)?;
            tracker.note(&path);
            println!(
                "few-shot k={k}: {} example(s) over {} label(s) -> {}",
                sampled.len(),
                inventory.len(),
                path.display()
            );
        }
        manifest::write(&self.out_dir.join("manifest.json"), "few-shot", cfg, tracker)?;
        Ok(RunOutcome::Done)
    }
}
