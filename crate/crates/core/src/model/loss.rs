//! Task losses and batched gradient accumulation.

use super::forward::{backward, forward_example, ForwardOptions, ForwardOutput, Heads, OutputGrads};
use super::params::{ModelConfig, Parameters};
use super::tensor::{log_sum_exp, Scalar};
use crate::error::{Error, Result};
use crate::pretrain_data::IGNORE_LABEL;
use crate::tokenizer::EncodedInput;
use rayon::prelude::*;

/// Softmax cross-entropy `-log p(target)` in natural log.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    log_sum_exp(logits) - logits[target]
}

/// `∂CE/∂logits = softmax(logits) - onehot(target)`, scaled by `weight`.
pub fn cross_entropy_grad<T: Scalar>(logits: &[T], target: usize, weight: T) -> Vec<T> {
    let lse = log_sum_exp(logits);
    let mut g: Vec<T> = logits
        .iter()
        .map(|&z| if z == T::neg_infinity() { T::zero() } else { (z - lse).exp() * weight })
        .collect();
    g[target] -= weight;
    g
}

/// Training target of one input.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Pretrain { mlm_labels: &'a [i32], nsp_label: u8 },
    Classification(usize),
    Span { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a EncodedInput,
    pub target: Target<'a>,
}

/// Batch mean loss and its components. Components absent from the batch are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mlm: Option<f64>,
    pub nsp: Option<f64>,
    pub classification: Option<f64>,
    pub qa: Option<f64>,
}

/// Denominators that turn per-example sums into batch means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Normalizer {
    pub mlm_positions: usize,
    pub nsp: usize,
    pub classification: usize,
    pub qa: usize,
}

impl Normalizer {
    pub fn of(samples: &[Sample]) -> Result<Self> {
        let mut n = Normalizer::default();
        for s in samples {
            match s.target {
                Target::Pretrain { mlm_labels, .. } => {
                    n.nsp += 1;
                    n.mlm_positions += mlm_labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
                }
                Target::Classification(_) => n.classification += 1,
                Target::Span { .. } => n.qa += 1,
            }
        }
        if n.nsp > 0 && n.mlm_positions == 0 {
            return Err(Error::NoMlmTargets);
        }
        Ok(n)
    }
}

/// Labeled MLM positions of a label row.
pub fn mlm_positions(labels: &[i32]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(i, _)| i)
        .collect()
}

/// Heads needed to score `target`.
pub fn heads_for(target: &Target) -> Heads {
    match target {
        Target::Pretrain { mlm_labels, .. } => Heads::pretraining(mlm_positions(mlm_labels)),
        Target::Classification(_) => Heads::classification(),
        Target::Span { .. } => Heads::qa(),
    }
}

/// Summed (not yet averaged) loss terms of one example.
#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    mlm: f64,
    nsp: f64,
    classification: f64,
    qa: f64,
}

fn check_class(label: usize, arity: usize) -> Result<()> {
    if label >= arity {
        return Err(Error::IndexOutOfRange(format!("label {label} outside {arity} classes")));
    }
    Ok(())
}

/// Loss terms of one example and the gradient of the batch mean loss with
/// respect to its logits.
fn example_terms<T: Scalar>(
    out: &ForwardOutput<T>,
    target: &Target,
    norm: &Normalizer,
    vocab_size: usize,
) -> Result<(Terms, OutputGrads<T>)> {
    let mut terms = Terms::default();
    let mut grads = OutputGrads::default();
    match *target {
        Target::Pretrain { mlm_labels, nsp_label } => {
            if mlm_labels.len() != out.seq_len {
                return Err(Error::ShapeMismatch(format!(
                    "{} MLM labels for a sequence of {}",
                    mlm_labels.len(),
                    out.seq_len
                )));
            }
            check_class(nsp_label as usize, 2)?;
            let w = T::one() / T::from_usize(norm.mlm_positions).unwrap();
            let mut g = Vec::with_capacity(out.mlm_logits.len());
            for (r, &p) in out.mlm_positions.iter().enumerate() {
                let label = mlm_labels[p];
                if label < 0 || label as usize >= vocab_size {
                    return Err(Error::TokenOutOfRange { id: label as u32, vocab_size });
                }
                let row = &out.mlm_logits[r * vocab_size..(r + 1) * vocab_size];
                terms.mlm += cross_entropy(row, label as usize).to_f64().unwrap();
                g.extend(cross_entropy_grad(row, label as usize, w));
            }
            grads.mlm_logits = g;
            let logits = out.nsp_logits.expect("NSP head requested");
            terms.nsp = cross_entropy(&logits, nsp_label as usize).to_f64().unwrap();
            let g = cross_entropy_grad(&logits, nsp_label as usize, T::one() / T::from_usize(norm.nsp).unwrap());
            grads.nsp_logits = Some([g[0], g[1]]);
        }
        Target::Classification(label) => {
            check_class(label, 2)?;
            let logits = out.cls_logits.expect("classification head requested");
            terms.classification = cross_entropy(&logits, label).to_f64().unwrap();
            let w = T::one() / T::from_usize(norm.classification).unwrap();
            let g = cross_entropy_grad(&logits, label, w);
            grads.cls_logits = Some([g[0], g[1]]);
        }
        Target::Span { start, end } => {
            if start > end || end >= out.active_len {
                return Err(Error::IndexOutOfRange(format!(
                    "span ({start}, {end}) outside {} unpadded positions",
                    out.active_len
                )));
            }
            let s = out.qa_start_logits.as_ref().expect("QA head requested");
            let e = out.qa_end_logits.as_ref().expect("QA head requested");
            let ls = cross_entropy(s, start).to_f64().unwrap();
            let le = cross_entropy(e, end).to_f64().unwrap();
            terms.qa = 0.5 * (ls + le);
            let w = T::lit(0.5) / T::from_usize(norm.qa).unwrap();
            grads.qa_start_logits = Some(cross_entropy_grad(s, start, w));
            grads.qa_end_logits = Some(cross_entropy_grad(e, end, w));
        }
    }
    Ok((terms, grads))
}

fn combine(terms: &[Terms], norm: &Normalizer) -> LossParts {
    let mut sum = Terms::default();
    for t in terms {
        sum.mlm += t.mlm;
        sum.nsp += t.nsp;
        sum.classification += t.classification;
        sum.qa += t.qa;
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let mlm = mean(sum.mlm, norm.mlm_positions);
    let nsp = mean(sum.nsp, norm.nsp);
    let classification = mean(sum.classification, norm.classification);
    let qa = mean(sum.qa, norm.qa);
    let total = [mlm, nsp, classification, qa].iter().flatten().sum();
    LossParts { total, mlm, nsp, classification, qa }
}

/// Mean cross-entropy over labeled MLM positions plus NSP cross-entropy,
/// for outputs produced with [`Heads::pretraining`].
pub fn mlm_nsp_loss<T: Scalar>(
    outputs: &[ForwardOutput<T>],
    mlm_labels: &[&[i32]],
    nsp_labels: &[u8],
    vocab_size: usize,
) -> Result<LossParts> {
    let targets: Vec<Target> = mlm_labels
        .iter()
        .zip(nsp_labels)
        .map(|(&mlm_labels, &nsp_label)| Target::Pretrain { mlm_labels, nsp_label })
        .collect();
    outputs_loss(outputs, &targets, vocab_size)
}

pub fn classification_loss<T: Scalar>(output: &ForwardOutput<T>, label: usize) -> Result<f64> {
    let parts = outputs_loss(std::slice::from_ref(output), &[Target::Classification(label)], 0)?;
    Ok(parts.total)
}

pub fn qa_loss<T: Scalar>(output: &ForwardOutput<T>, start: usize, end: usize) -> Result<f64> {
    let parts = outputs_loss(std::slice::from_ref(output), &[Target::Span { start, end }], 0)?;
    Ok(parts.total)
}

fn outputs_loss<T: Scalar>(outputs: &[ForwardOutput<T>], targets: &[Target], vocab_size: usize) -> Result<LossParts> {
    let mut norm = Normalizer::default();
    for (o, t) in outputs.iter().zip(targets) {
        match t {
            Target::Pretrain { .. } => {
                norm.nsp += 1;
                norm.mlm_positions += o.mlm_positions.len();
            }
            Target::Classification(_) => norm.classification += 1,
            Target::Span { .. } => norm.qa += 1,
        }
    }
    if norm.nsp > 0 && norm.mlm_positions == 0 {
        return Err(Error::NoMlmTargets);
    }
    let terms = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| example_terms(o, t, &norm, vocab_size).map(|(terms, _)| terms))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&terms, &norm))
}

/// Batch mean loss without gradients and without dropout.
pub fn batch_loss<T: Scalar>(params: &Parameters<T>, config: &ModelConfig, samples: &[Sample]) -> Result<LossParts> {
    let norm = Normalizer::of(samples)?;
    let terms = samples
        .par_iter()
        .map(|s| {
            let (out, _) = forward_example(params, config, s.input, &heads_for(&s.target), &ForwardOptions::default())?;
            example_terms(&out, &s.target, &norm, config.vocab_size).map(|(t, _)| t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&terms, &norm))
}

/// Examples per gradient buffer. Fixed so the reduction order, and with it the
/// floating-point result, does not depend on the number of threads.
pub const GRAD_CHUNK: usize = 4;

/// Batch mean loss and its gradient for every parameter.
///
/// `dropout` is `(seed, first_stream)`; sample `i` uses stream `first_stream + i`.
pub fn batch_loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    samples: &[Sample],
    dropout: Option<(u64, u64)>,
) -> Result<(LossParts, Parameters<T>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("batch".into()));
    }
    let norm = Normalizer::of(samples)?;
    let chunks = samples
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = params.zeros_like();
            let mut terms = Vec::with_capacity(chunk.len());
            for (k, s) in chunk.iter().enumerate() {
                let opts = match dropout {
                    Some((seed, base)) => ForwardOptions::train(seed, base + (c * GRAD_CHUNK + k) as u64),
                    None => ForwardOptions::default(),
                };
                let (out, cache) = forward_example(params, config, s.input, &heads_for(&s.target), &opts)?;
                let (t, g) = example_terms(&out, &s.target, &norm, config.vocab_size)?;
                backward(params, config, &cache, &g, &mut grads);
                terms.push(t);
            }
            Ok((terms, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all_terms = Vec::with_capacity(samples.len());
    let mut iter = chunks.into_iter();
    let (terms, mut grads) = iter.next().expect("non-empty batch");
    all_terms.extend(terms);
    for (terms, g) in iter {
        all_terms.extend(terms);
        grads.add_assign(&g);
    }
    Ok((combine(&all_terms, &norm), grads))
}

/// Per-example loss gradient with respect to the head outputs; exposed for
/// callers driving [`backward`] directly.
pub fn output_grads<T: Scalar>(
    out: &ForwardOutput<T>,
    target: &Target,
    norm: &Normalizer,
    vocab_size: usize,
) -> Result<OutputGrads<T>> {
    example_terms(out, target, norm, vocab_size).map(|(_, g)| g)
}
