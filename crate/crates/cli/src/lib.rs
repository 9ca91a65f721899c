//! Command-line front end: argument parsing, configuration merging and the
//! eight subcommands.

pub mod config;

use clap::{Args, Parser, Subcommand};
use config::{Profile, RunConfig};
use dialbert::corpus::{build_corpus, corpus_stats, read_raw_documents, Corpus};
use dialbert::datasets::{
    default_label_set, featurize_classification, featurize_qa, load_classification_dataset, load_qa_dataset,
    split_dataset, TaskData, TaskKind,
};
use dialbert::eval::{evaluate_task, DEFAULT_MAX_ANSWER_LEN};
use dialbert::pretrain_data::{build_pretrain_dataset, load_dataset, save_dataset, MaskMode, MaskingPolicy};
use dialbert::tokenizer::{Vocab, WordPieceTrainer};
use dialbert::trainer::{
    finetune, load_checkpoint, pretrain, save_checkpoint, sequential_transfer, Checkpoint, StepLog, TrainConfig,
    TransferStage,
};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "dialbert", version, about = "Corpus preparation, pretraining, fine-tuning and evaluation")]
pub struct Cli {
    /// TOML run configuration with corpus/tokenizer/model/train/eval sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (masking, pairing, sampling, init, splits).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean and script-filter raw documents into a corpus file.
    PrepareData {
        /// Plain text (one document) or JSON lines of {id, text}.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a WordPiece vocabulary on a corpus.
    TrainVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        min_frequency: Option<u64>,
    },
    /// Pair, lay out and mask a corpus into pretraining examples.
    BuildPretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        max_seq_len: Option<usize>,
        #[arg(long)]
        mask_prob: Option<f64>,
        #[arg(long, value_parser = parse_mask_mode)]
        mask_mode: Option<MaskMode>,
        #[arg(long)]
        next_ratio: Option<f64>,
    },
    /// MLM + NSP pretraining from scratch.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tune a checkpoint on one task, keeping the best dev checkpoint.
    Finetune {
        #[command(flatten)]
        task: TaskFlags,
        /// Training file.
        #[arg(long)]
        train: PathBuf,
        /// Dev file; without it the training file is split.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Fine-tune through several datasets in order, each stage starting from
    /// the previous stage's best checkpoint.
    Transfer {
        #[command(flatten)]
        task: TaskFlags,
        /// `TRAIN` or `TRAIN,DEV`; repeat once per stage.
        #[arg(long, required = true)]
        stage: Vec<String>,
        /// Steps per stage, in stage order.
        #[arg(long)]
        stage_steps: Vec<usize>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Score a fine-tuned checkpoint on a test file.
    Evaluate {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        data: PathBuf,
        /// Also write one JSON prediction record per line here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        max_answer_len: Option<usize>,
    },
    /// Sentence, word and unique-word counts of a corpus file.
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TaskFlags {
    /// `classification` or `qa`
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// Pretrained or fine-tuned checkpoint to start from
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Steps between dev evaluations
    #[arg(long)]
    pub eval_every: Option<usize>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: dialbert::Error| e.to_string())
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, String> {
    s.parse()
}

/// Failure of a subcommand. `Usage` maps to exit code 2, the rest to 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl From<dialbert::Error> for Failure {
    fn from(e: dialbert::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain(_) => 1,
        }
    }

    /// The message on a single line.
    pub fn message(&self) -> String {
        let (Failure::Usage(m) | Failure::Domain(m)) = self;
        m.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

type Outcome = Result<(), Failure>;

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| file.clone()).ok_or_else(|| Failure::Usage(format!("missing {what}")))
}

fn write_json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> Outcome {
    let line = serde_json::to_string(value).map_err(|e| Failure::Domain(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| Failure::Domain(e.to_string()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Domain(format!("{}: {e}", path.display()))
}

pub struct Context {
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self, Failure> {
        let config = match &cli.config {
            Some(p) => RunConfig::load(p).map_err(Failure::Domain)?,
            None => RunConfig::default(),
        };
        Ok(Context { config, seed: cli.seed, out: cli.out.clone() })
    }

    fn seed(&self) -> u64 {
        self.seed.or(self.config.train.seed).unwrap_or(0)
    }

    /// `defaults`, then the file's `[train]` section, then flags.
    fn train_config(&self, defaults: TrainConfig, flags: &TrainFlags) -> TrainConfig {
        let mut c = defaults;
        self.config.train.apply(&mut c);
        c.seed = self.seed();
        if let Some(v) = flags.steps {
            c.total_steps = v;
        }
        if let Some(v) = flags.lr {
            c.learning_rate = v;
        }
        if let Some(v) = flags.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = flags.max_seq_len {
            c.max_seq_len = v;
        }
        if let Some(v) = flags.eval_every {
            c.eval_every = v;
        }
        c
    }

    fn out(&self, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
        required(self.out.clone(), file, what)
    }

    fn label_set(&self, ckpt: &Checkpoint) -> Vec<String> {
        ckpt.label_set.clone().or_else(|| self.config.eval.label_set.clone()).unwrap_or_else(default_label_set)
    }
}

fn checkpoint_vocab(ckpt: &Checkpoint) -> Result<&Vocab, Failure> {
    ckpt.vocab.as_ref().ok_or_else(|| Failure::Domain("checkpoint carries no vocabulary".into()))
}

/// Loads and featurizes a task file against a checkpoint's vocabulary.
pub fn load_task_data(
    path: &Path,
    task: TaskKind,
    vocab: &Vocab,
    label_set: &[String],
    max_seq_len: usize,
) -> Result<TaskData, Failure> {
    Ok(match task {
        TaskKind::Classification => {
            let examples = load_classification_dataset(path, label_set)?;
            TaskData::Classification(featurize_classification(&examples, label_set, vocab, max_seq_len)?)
        }
        TaskKind::Qa => TaskData::Qa(featurize_qa(&load_qa_dataset(path)?, vocab, max_seq_len)?),
    })
}

/// Training and dev data; without a dev file the training file is split
/// with the run seed.
fn train_dev(
    ctx: &Context,
    task: TaskKind,
    train: &Path,
    dev: Option<&Path>,
    vocab: &Vocab,
    labels: &[String],
    max_len: usize,
) -> Result<(TaskData, TaskData), Failure> {
    let train_data = load_task_data(train, task, vocab, labels, max_len)?;
    if let Some(dev) = dev {
        return Ok((train_data, load_task_data(dev, task, vocab, labels, max_len)?));
    }
    let frac = ctx.config.eval.train_frac.unwrap_or(0.8);
    Ok(match train_data {
        TaskData::Classification(f) => {
            let (a, b) = split_dataset(&f, frac, ctx.seed())?;
            (TaskData::Classification(a), TaskData::Classification(b))
        }
        TaskData::Qa(f) => {
            let (a, b) = split_dataset(&f, frac, ctx.seed())?;
            (TaskData::Qa(a), TaskData::Qa(b))
        }
    })
}

fn load_base(ctx: &Context, flags: &TaskFlags) -> Result<Checkpoint, Failure> {
    let mut base = load_checkpoint(&flags.checkpoint)?;
    if flags.task == TaskKind::Classification {
        base.label_set = Some(ctx.label_set(&base));
    }
    Ok(base)
}

impl Context {
    /// Fine-tuning defaults for `train_examples`, then file, then flags.
    fn finetune_config(&self, base: &Checkpoint, train_examples: usize, flags: &TrainFlags) -> TrainConfig {
        let mut cfg = self.train_config(TrainConfig::finetune(train_examples), flags);
        cfg.max_seq_len = cfg.max_seq_len.min(base.model_config.max_positions);
        cfg
    }
}

/// Runs one parsed command, writing human-facing output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Outcome {
    let ctx = Context::from_cli(cli)?;
    let cfg = &ctx.config;
    match &cli.command {
        Command::PrepareData { input } => {
            let input = required(input.clone(), &cfg.corpus.raw, "--input (or corpus.raw)")?;
            let dest = ctx.out(&cfg.corpus.path, "--out (or corpus.path)")?;
            let corpus = build_corpus(&read_raw_documents(&input)?)?;
            corpus.write(&dest)?;
            print_stats(out, &corpus)
        }
        Command::TrainVocab { corpus, vocab_size, min_frequency } => {
            let corpus_path = required(corpus.clone(), &cfg.corpus.path, "--corpus (or corpus.path)")?;
            let dest = ctx.out(&cfg.tokenizer.vocab, "--out (or tokenizer.vocab)")?;
            let defaults = WordPieceTrainer::default();
            let trainer = WordPieceTrainer {
                vocab_size: vocab_size.or(cfg.tokenizer.vocab_size).unwrap_or(defaults.vocab_size),
                min_frequency: min_frequency.or(cfg.tokenizer.min_frequency).unwrap_or(defaults.min_frequency),
            };
            let vocab = trainer.train(&Corpus::read(&corpus_path)?)?;
            vocab.save(&dest)?;
            writeln!(out, "vocab_size {}", vocab.len()).map_err(io_err(&dest))
        }
        Command::BuildPretrain { corpus, vocab, max_seq_len, mask_prob, mask_mode, next_ratio } => {
            let corpus_path = required(corpus.clone(), &cfg.corpus.path, "--corpus (or corpus.path)")?;
            let vocab_path = required(vocab.clone(), &cfg.tokenizer.vocab, "--vocab (or tokenizer.vocab)")?;
            let dest = ctx.out(&cfg.corpus.dataset, "--out (or corpus.dataset)")?;
            let defaults = MaskingPolicy::default();
            let policy = MaskingPolicy {
                mask_prob: mask_prob.or(cfg.corpus.mask_prob).unwrap_or(defaults.mask_prob),
                mode: mask_mode.or(cfg.corpus.mask_mode).unwrap_or(defaults.mode),
                seed: ctx.seed(),
            };
            let max_len = max_seq_len.or(cfg.corpus.max_seq_len).unwrap_or(TrainConfig::default().max_seq_len);
            let ratio = next_ratio.or(cfg.corpus.next_ratio).unwrap_or(0.5);
            let data = build_pretrain_dataset(
                &Corpus::read(&corpus_path)?,
                &Vocab::load(&vocab_path)?,
                &policy,
                max_len,
                ratio,
                ctx.seed(),
            )?;
            save_dataset(&data, &dest)?;
            writeln!(out, "examples {}", data.len()).map_err(io_err(&dest))
        }
        Command::Pretrain { data, vocab, profile, train } => {
            let data_path = required(data.clone(), &cfg.corpus.dataset, "--data (or corpus.dataset)")?;
            let vocab_path = required(vocab.clone(), &cfg.tokenizer.vocab, "--vocab (or tokenizer.vocab)")?;
            let dest = ctx.out(&None, "--out")?;
            let vocab = Vocab::load(&vocab_path)?;
            let model = cfg.model.build(*profile, vocab.len());
            let train = ctx.train_config(TrainConfig::default(), train);
            let dataset = load_dataset(&data_path)?;
            let mut failed = None;
            let ckpt = pretrain(&dataset, &model, &train, Some(&vocab), &mut |r: &StepLog| {
                if failed.is_none() {
                    failed = write_json_line(out, r).err();
                }
            })?;
            if let Some(f) = failed {
                return Err(f);
            }
            save_checkpoint(&ckpt, &dest)?;
            Ok(())
        }
        Command::Finetune { task, train, dev, flags } => {
            let dest = ctx.out(&None, "--out")?;
            let base = load_base(&ctx, task)?;
            let vocab = checkpoint_vocab(&base)?;
            let labels = ctx.label_set(&base);
            let max_len = ctx.finetune_config(&base, 1, flags).max_seq_len;
            let (train_data, dev_data) = train_dev(&ctx, task.task, train, dev.as_deref(), vocab, &labels, max_len)?;
            let cfg = ctx.finetune_config(&base, train_data.len(), flags);
            let mut failed = None;
            let outcome = finetune(&base, &train_data, &dev_data, &cfg, &mut |r: &StepLog| {
                if failed.is_none() {
                    failed = write_json_line(out, r).err();
                }
            })?;
            if let Some(f) = failed {
                return Err(f);
            }
            for e in &outcome.evaluations {
                write_json_line(out, e)?;
            }
            save_checkpoint(&outcome.best, &dest)?;
            writeln!(out, "best step {} {:.6}", outcome.best.step, outcome.best_metric).map_err(io_err(&dest))
        }
        Command::Transfer { task, stage, stage_steps, flags } => {
            let dest = ctx.out(&None, "--out")?;
            if !stage_steps.is_empty() && stage_steps.len() != stage.len() {
                return Err(Failure::Usage(format!(
                    "{} --stage-steps values for {} stages",
                    stage_steps.len(),
                    stage.len()
                )));
            }
            let base = load_base(&ctx, task)?;
            let vocab = checkpoint_vocab(&base)?;
            let labels = ctx.label_set(&base);
            let max_len = ctx.finetune_config(&base, 1, flags).max_seq_len;
            let mut stages = Vec::with_capacity(stage.len());
            for (i, spec) in stage.iter().enumerate() {
                let (train, dev) = match spec.split_once(',') {
                    Some((t, d)) => (PathBuf::from(t), Some(PathBuf::from(d))),
                    None => (PathBuf::from(spec), None),
                };
                let (train, dev) = train_dev(&ctx, task.task, &train, dev.as_deref(), vocab, &labels, max_len)?;
                let steps = stage_steps
                    .get(i)
                    .copied()
                    .unwrap_or_else(|| ctx.finetune_config(&base, train.len(), flags).total_steps);
                stages.push(TransferStage { train, dev, total_steps: Some(steps) });
            }
            // Warmup and evaluation interval follow the first stage.
            let cfg = ctx.finetune_config(&base, stages[0].train.len(), flags);
            let mut failed = None;
            let outcome = sequential_transfer(&base, &stages, &cfg, &mut |_, r: &StepLog| {
                if failed.is_none() {
                    failed = write_json_line(out, r).err();
                }
            })?;
            if let Some(f) = failed {
                return Err(f);
            }
            for s in &outcome.stages {
                writeln!(out, "stage {} best step {} {:.6}", s.stage, s.best_step, s.best_metric)
                    .map_err(io_err(&dest))?;
            }
            save_checkpoint(&outcome.checkpoint, &dest)?;
            Ok(())
        }
        Command::Evaluate { task, data, predictions, max_answer_len } => {
            let ckpt = load_checkpoint(&task.checkpoint)?;
            let vocab = checkpoint_vocab(&ckpt)?;
            let labels = ctx.label_set(&ckpt);
            let max_len = cfg.train.max_seq_len.unwrap_or(ckpt.model_config.max_positions).min(ckpt.model_config.max_positions);
            let test = load_task_data(data, task.task, vocab, &labels, max_len)?;
            let answer_len = max_answer_len.or(cfg.eval.max_answer_len).unwrap_or(DEFAULT_MAX_ANSWER_LEN);
            let (report, records) = evaluate_task(&ckpt, &test, answer_len)?;
            if let Some(path) = predictions {
                let mut buf = Vec::new();
                for r in &records {
                    write_json_line(&mut buf, r)?;
                }
                std::fs::write(path, buf).map_err(io_err(path))?;
            }
            if let Some(path) = &ctx.out {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Domain(e.to_string()))?;
                std::fs::write(path, json + "\n").map_err(io_err(path))?;
            }
            write!(out, "{report}").map_err(io_err(data))
        }
        Command::Stats { corpus } => {
            let path = required(corpus.clone(), &cfg.corpus.path, "--corpus (or corpus.path)")?;
            print_stats(out, &Corpus::read(&path)?)
        }
    }
}

fn print_stats(out: &mut dyn Write, corpus: &Corpus) -> Outcome {
    let s = corpus_stats(corpus);
    writeln!(out, "sentences {}\nwords {}\nunique_words {}", s.sentence_count, s.word_count, s.unique_word_count)
        .map_err(|e| Failure::Domain(e.to_string()))
}
