use super::adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use super::checkpoint::{save_checkpoint, Checkpoint, MetricPoint, StepLog};
use super::config::{lr_schedule, TrainConfig};
use crate::datasets::{TaskData, TaskKind, CLASSIFICATION_ARITY};
use crate::error::{Error, Result};
use crate::eval::{dev_metric, DEFAULT_MAX_ANSWER_LEN};
use crate::model::{batch_loss_and_grad, Head, ModelConfig, Parameters, Sample, Target};
use crate::pretrain_data::PretrainExample;
use crate::rng::{self, domain};
use crate::tokenizer::Vocab;
use rand::seq::SliceRandom;

/// Draws batches from reshuffled passes over `0..n`. Pass `e` is shuffled
/// with stream `e`, so batch order depends only on the seed.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { order: (0..n).collect(), pos: 0, pass: 0, seed };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng::stream(self.seed, domain::BATCH, self.pass));
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig { beta1: c.beta1, beta2: c.beta2, epsilon: c.epsilon, weight_decay: c.weight_decay }
}

fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtStep { step, source: Box::new(e) }
}

/// One optimizer step on `samples`; returns the batch loss.
fn train_step(
    params: &mut Parameters<f32>,
    optimizer: &mut OptimizerState<f32>,
    config: &ModelConfig,
    train: &TrainConfig,
    samples: &[Sample],
    step: usize,
) -> Result<(f64, f64)> {
    let base = (step as u64 - 1) * train.batch_size as u64;
    let (loss, mut grads) = batch_loss_and_grad(params, config, samples, Some((train.seed, base)))?;
    if let Some(max) = train.max_grad_norm {
        clip_grad_norm(&mut grads, max);
    }
    let lr = lr_schedule(step, train);
    adam_step(params, &grads, optimizer, lr, &adam_config(train))?;
    Ok((lr, loss.total))
}

fn check_lengths(config: &ModelConfig, max_len: usize) -> Result<()> {
    if max_len > config.max_positions {
        return Err(Error::SequenceTooLong { len: max_len, max: config.max_positions });
    }
    Ok(())
}

fn periodic_save(ckpt: &Checkpoint, train: &TrainConfig, name: &str) -> Result<()> {
    if let Some(dir) = &train.checkpoint_dir {
        save_checkpoint(ckpt, &dir.join(name))?;
    }
    Ok(())
}

/// MLM + NSP training from freshly initialized parameters.
///
/// `log` sees every step record as it is produced. With `checkpoint_dir`
/// set, `step-<k>.ckpt` is written every `checkpoint_every` steps and
/// `final.ckpt` at the end.
pub fn pretrain(
    dataset: &[PretrainExample],
    model_config: &ModelConfig,
    train: &TrainConfig,
    vocab: Option<&Vocab>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    model_config.validate()?;
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("pretraining dataset".into()));
    }
    if let Some(v) = vocab {
        if v.len() != model_config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocabulary has {} tokens, model expects {}",
                v.len(),
                model_config.vocab_size
            )));
        }
    }
    check_lengths(model_config, dataset.iter().map(|e| e.input.len()).max().unwrap_or(0))?;

    let params = Parameters::init(model_config, train.seed);
    let mut ckpt = Checkpoint::new(model_config.clone(), train.clone(), params);
    ckpt.vocab = vocab.cloned();
    let mut sampler = Sampler::new(dataset.len(), train.seed);
    for step in 1..=train.total_steps {
        let batch = sampler.next_batch(train.batch_size);
        let samples: Vec<Sample> = batch
            .iter()
            .map(|&i| {
                let ex = &dataset[i];
                Sample { input: &ex.input, target: Target::Pretrain { mlm_labels: &ex.mlm_labels, nsp_label: ex.nsp_label } }
            })
            .collect();
        let (lr, loss) = train_step(&mut ckpt.params, &mut ckpt.optimizer, model_config, train, &samples, step)
            .map_err(at_step(step))?;
        let record = StepLog { step, lr, loss, task: "pretrain".into() };
        log(&record);
        ckpt.loss_history.push(record);
        ckpt.step = step;
        if train.checkpoint_every > 0 && step % train.checkpoint_every == 0 && step < train.total_steps {
            periodic_save(&ckpt, train, &format!("step-{step}.ckpt"))?;
        }
    }
    periodic_save(&ckpt, train, "final.ckpt")?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Snapshot with the best dev metric; ties keep the earlier step.
    pub best: Checkpoint,
    pub best_metric: f64,
    /// State after the last step.
    pub last: Checkpoint,
    pub final_metric: f64,
    /// Every dev evaluation, including step 0 and the final step.
    pub evaluations: Vec<MetricPoint>,
    pub loss_history: Vec<StepLog>,
}

fn head_of(task: TaskKind) -> Head {
    match task {
        TaskKind::Classification => Head::Classification,
        TaskKind::Qa => Head::Qa,
    }
}

/// Owned training targets, so batches can borrow them.
enum Targets<'a> {
    Classification(Vec<(&'a crate::tokenizer::EncodedInput, usize)>),
    Span(Vec<(&'a crate::tokenizer::EncodedInput, (usize, usize))>),
}

fn targets(data: &TaskData) -> Result<Targets<'_>> {
    match data {
        TaskData::Classification(f) => {
            if let Some((i, x)) = f.iter().enumerate().find(|(_, x)| x.label >= CLASSIFICATION_ARITY) {
                return Err(Error::InvalidInput(format!(
                    "example {i}: label {} outside {CLASSIFICATION_ARITY} classes",
                    x.label
                )));
            }
            Ok(Targets::Classification(f.iter().map(|x| (&x.input, x.label)).collect()))
        }
        TaskData::Qa(f) => {
            let t: Vec<_> = f.iter().filter_map(|x| x.answer_span.map(|s| (&x.input, s))).collect();
            if t.is_empty() {
                return Err(Error::EmptyInput("no training question has its answer inside the input".into()));
            }
            Ok(Targets::Span(t))
        }
    }
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classification(v) => v.len(),
            Targets::Span(v) => v.len(),
        }
    }

    fn sample(&self, i: usize) -> Sample<'_> {
        match self {
            Targets::Classification(v) => Sample { input: v[i].0, target: Target::Classification(v[i].1) },
            Targets::Span(v) => Sample { input: v[i].0, target: Target::Span { start: v[i].1 .0, end: v[i].1 .1 } },
        }
    }
}

/// Fine-tunes every parameter on one task from a fresh task head and fresh
/// optimizer state, keeping the checkpoint with the best dev metric
/// (accuracy for classification, token F1 for QA). Dev evaluations happen
/// at step 0, every `eval_every` steps, and at the last step. Zero total
/// steps is allowed and returns the starting point with its new head.
pub fn finetune(
    base: &Checkpoint,
    train_data: &TaskData,
    dev_data: &TaskData,
    train: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<FinetuneOutcome> {
    finetune_with(base, train_data, dev_data, train, true, log)
}

fn finetune_with(
    base: &Checkpoint,
    train_data: &TaskData,
    dev_data: &TaskData,
    train: &TrainConfig,
    fresh_head: bool,
    log: &mut dyn FnMut(&StepLog),
) -> Result<FinetuneOutcome> {
    if train.total_steps > 0 {
        train.validate()?;
    }
    let task = train_data.kind();
    if dev_data.kind() != task {
        return Err(Error::InvalidInput(format!("train set is {task}, dev set is {}", dev_data.kind())));
    }
    if dev_data.is_empty() {
        return Err(Error::EmptyInput("dev set".into()));
    }
    let config = &base.model_config;
    check_lengths(config, train_data.max_seq_len().max(dev_data.max_seq_len()))?;
    let targets = targets(train_data)?;

    let mut params = base.params.clone();
    if fresh_head {
        params.reinit_head(head_of(task), train.seed);
    }
    let mut optimizer = OptimizerState::for_params(&params);
    let snapshot = |params: &Parameters<f32>, optimizer: &OptimizerState<f32>, step, history: &[StepLog], evals: &[MetricPoint]| {
        let mut c = Checkpoint::new(config.clone(), train.clone(), params.clone());
        c.optimizer = optimizer.clone();
        c.step = step;
        c.task = Some(task);
        c.label_set = base.label_set.clone();
        c.vocab = base.vocab.clone();
        c.loss_history = history.to_vec();
        c.metric_history = evals.to_vec();
        c
    };

    let mut evaluations = Vec::new();
    let mut history = Vec::new();
    let evaluate = |params: &Parameters<f32>, step: usize, evaluations: &mut Vec<MetricPoint>| -> Result<f64> {
        let (metric, value) = dev_metric(params, config, dev_data, DEFAULT_MAX_ANSWER_LEN).map_err(at_step(step))?;
        evaluations.push(MetricPoint { step, metric, value });
        Ok(value)
    };

    let mut best_metric = evaluate(&params, 0, &mut evaluations)?;
    let mut best = snapshot(&params, &optimizer, 0, &history, &evaluations);
    let mut final_metric = best_metric;
    let mut sampler = Sampler::new(targets.len(), train.seed);
    for step in 1..=train.total_steps {
        let batch: Vec<Sample> = sampler.next_batch(train.batch_size).into_iter().map(|i| targets.sample(i)).collect();
        let (lr, loss) =
            train_step(&mut params, &mut optimizer, config, train, &batch, step).map_err(at_step(step))?;
        let record = StepLog { step, lr, loss, task: task.to_string() };
        log(&record);
        history.push(record);
        if (train.eval_every > 0 && step % train.eval_every == 0) || step == train.total_steps {
            final_metric = evaluate(&params, step, &mut evaluations)?;
            if final_metric > best_metric {
                best_metric = final_metric;
                best = snapshot(&params, &optimizer, step, &history, &evaluations);
            }
        }
    }
    best.metric_history = evaluations.clone();
    let last = snapshot(&params, &optimizer, train.total_steps, &history, &evaluations);
    Ok(FinetuneOutcome { best, best_metric, last, final_metric, evaluations, loss_history: history })
}

/// Training and dev data of one transfer stage. `total_steps` overrides the
/// shared training configuration for this stage.
#[derive(Debug, Clone)]
pub struct TransferStage {
    pub train: TaskData,
    pub dev: TaskData,
    pub total_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub best_step: usize,
    pub best_metric: f64,
    pub final_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub checkpoint: Checkpoint,
    pub stages: Vec<StageReport>,
}

/// Fine-tunes through `stages` in order, each stage starting from the
/// previous stage's best checkpoint. The task head is freshly initialized
/// only for the first stage; later stages continue training it.
pub fn sequential_transfer(
    base: &Checkpoint,
    stages: &[TransferStage],
    train: &TrainConfig,
    log: &mut dyn FnMut(usize, &StepLog),
) -> Result<TransferOutcome> {
    let Some(first) = stages.first() else {
        return Err(Error::EmptyInput("transfer stage list".into()));
    };
    let task = first.train.kind();
    if let Some(i) = stages.iter().position(|s| s.train.kind() != task || s.dev.kind() != task) {
        return Err(Error::Stage {
            stage: i,
            source: Box::new(Error::InvalidInput(format!("stages mix tasks; stage 0 is {task}"))),
        });
    }
    let mut current = base.clone();
    let mut reports = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let mut cfg = train.clone();
        if let Some(steps) = stage.total_steps {
            cfg.total_steps = steps;
        }
        let outcome = finetune_with(&current, &stage.train, &stage.dev, &cfg, i == 0, &mut |r| log(i, r))
            .map_err(|e| Error::Stage { stage: i, source: Box::new(e) })?;
        reports.push(StageReport {
            stage: i,
            best_step: outcome.best.step,
            best_metric: outcome.best_metric,
            final_metric: outcome.final_metric,
        });
        current = outcome.best;
    }
    Ok(TransferOutcome { checkpoint: current, stages: reports })
}
