use super::metrics::{accuracy, macro_f1, qa_metrics, qa_span_decode, ClassificationResult, QaPrediction};
use crate::datasets::{default_label_set, ClassificationFeature, QaFeature, TaskData, TaskKind};
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy, forward_example, mlm_positions, ForwardOptions, ForwardOutput, Heads, ModelConfig, Parameters,
};
use crate::tokenizer::EncodedInput;
use crate::pretrain_data::PretrainExample;
use crate::trainer::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;

/// Examples per parallel forward call.
const EVAL_CHUNK: usize = 32;

fn forward_all<'a, F, R>(
    params: &Parameters<f32>,
    config: &ModelConfig,
    n: usize,
    input: impl Fn(usize) -> (&'a EncodedInput, Heads) + Sync,
    read: F,
) -> Result<Vec<R>>
where
    F: Fn(usize, ForwardOutput<f32>) -> Result<R> + Sync,
    R: Send,
{
    (0..n)
        .into_par_iter()
        .with_min_len(EVAL_CHUNK)
        .map(|i| {
            let (x, heads) = input(i);
            let (out, _) = forward_example(params, config, x, &heads, &ForwardOptions::default())?;
            read(i, out)
        })
        .collect()
}

/// Argmax class per example; ties go to the lower class index.
pub fn predict_classification(
    params: &Parameters<f32>,
    config: &ModelConfig,
    features: &[ClassificationFeature],
) -> Result<Vec<usize>> {
    forward_all(
        params,
        config,
        features.len(),
        |i| (&features[i].input, Heads::classification()),
        |_, out| {
            let l = out.cls_logits.expect("classification head");
            Ok(usize::from(l[1] > l[0]))
        },
    )
}

/// Best span per example mapped back to context words. Examples without a
/// valid span predict the empty string.
pub fn predict_qa(
    params: &Parameters<f32>,
    config: &ModelConfig,
    features: &[QaFeature],
    max_answer_len: usize,
) -> Result<Vec<QaPrediction>> {
    forward_all(
        params,
        config,
        features.len(),
        |i| (&features[i].input, Heads::qa()),
        |i, out| {
            let f = &features[i];
            let predicted = match f.context_range {
                None => String::new(),
                Some(range) => {
                    let start = out.qa_start_logits.as_ref().expect("QA head");
                    let end = out.qa_end_logits.as_ref().expect("QA head");
                    match qa_span_decode(start, end, range, max_answer_len) {
                        Ok(span) => f.span_text(span.start, span.end),
                        Err(Error::NoValidSpan) => String::new(),
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(QaPrediction { id: f.id.clone(), predicted, golds: f.answers.clone() })
        },
    )
}

/// Model-selection metric: accuracy for classification, mean token F1 for QA.
pub fn dev_metric(
    params: &Parameters<f32>,
    config: &ModelConfig,
    data: &TaskData,
    max_answer_len: usize,
) -> Result<(String, f64)> {
    match data {
        TaskData::Classification(f) => {
            let pred = predict_classification(params, config, f)?;
            let correct = pred.iter().zip(f).filter(|(p, f)| **p == f.label).count();
            if f.is_empty() {
                return Err(Error::EmptyInput("dev set".into()));
            }
            Ok(("accuracy".into(), correct as f64 / f.len() as f64))
        }
        TaskData::Qa(f) => Ok(("f1".into(), qa_metrics(&predict_qa(params, config, f, max_answer_len)?)?.f1)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub dataset_size: usize,
    /// SHA-256 of the model and training configuration.
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task      {}", self.task)?;
        writeln!(f, "examples  {}", self.dataset_size)?;
        writeln!(f, "config    {}", &self.config_hash[..12.min(self.config_hash.len())])?;
        for (k, v) in &self.metrics {
            writeln!(f, "{k:<12}{:>8.2}", 100.0 * v)?;
        }
        Ok(())
    }
}

/// One prediction line of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionRecord {
    Label { index: usize, gold: String, predicted: String },
    Answer { id: String, answer: String },
}

pub fn config_hash(ckpt: &Checkpoint) -> String {
    let json = serde_json::to_vec(&(&ckpt.model_config, &ckpt.train_config)).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

/// Scores a checkpoint on a featurized test set.
pub fn evaluate_task(
    ckpt: &Checkpoint,
    data: &TaskData,
    max_answer_len: usize,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    if let Some(task) = ckpt.task {
        if task != data.kind() {
            return Err(Error::InvalidInput(format!("checkpoint is trained for {task}, data is {}", data.kind())));
        }
    }
    let (params, config) = (&ckpt.params, &ckpt.model_config);
    let mut metrics = BTreeMap::new();
    let records = match data {
        TaskData::Classification(f) => {
            let labels = ckpt.label_set.clone().unwrap_or_else(default_label_set);
            let pred = predict_classification(params, config, f)?;
            let result = ClassificationResult::new(
                f.iter().map(|x| labels[x.label].clone()).collect(),
                pred.iter().map(|&p| labels[p].clone()).collect(),
                labels.clone(),
            )?;
            metrics.insert("accuracy".to_string(), accuracy(&result)?);
            metrics.insert("macro_f1".to_string(), macro_f1(&result)?);
            result
                .gold
                .into_iter()
                .zip(result.predicted)
                .enumerate()
                .map(|(index, (gold, predicted))| PredictionRecord::Label { index, gold, predicted })
                .collect()
        }
        TaskData::Qa(f) => {
            let pred = predict_qa(params, config, f, max_answer_len)?;
            let scores = qa_metrics(&pred)?;
            metrics.insert("exact_match".to_string(), scores.exact_match);
            metrics.insert("f1".to_string(), scores.f1);
            metrics.insert("recall".to_string(), scores.recall);
            pred.into_iter().map(|p| PredictionRecord::Answer { id: p.id, answer: p.predicted }).collect()
        }
    };
    let report = MetricsReport { task: data.kind(), dataset_size: data.len(), config_hash: config_hash(ckpt), metrics };
    Ok((report, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Mean cross-entropy over all labeled MLM positions.
    pub mlm_loss: f64,
    pub mlm_accuracy: f64,
    pub nsp_loss: f64,
    pub nsp_accuracy: f64,
}

/// MLM and NSP loss and accuracy without dropout.
pub fn evaluate_pretraining(
    params: &Parameters<f32>,
    config: &ModelConfig,
    dataset: &[PretrainExample],
) -> Result<PretrainMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("pretraining dataset".into()));
    }
    let v = config.vocab_size;
    let per_example = forward_all(
        params,
        config,
        dataset.len(),
        |i| (&dataset[i].input, Heads::pretraining(mlm_positions(&dataset[i].mlm_labels))),
        |i, out| {
            let ex = &dataset[i];
            let (mut loss, mut correct) = (0.0, 0usize);
            for (r, &p) in out.mlm_positions.iter().enumerate() {
                let row = &out.mlm_logits[r * v..(r + 1) * v];
                let label = ex.mlm_labels[p] as usize;
                loss += cross_entropy(row, label) as f64;
                let best = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == label);
            }
            let nsp = out.nsp_logits.expect("NSP head");
            let nsp_loss = cross_entropy(&nsp, ex.nsp_label as usize) as f64;
            let nsp_ok = usize::from(nsp[1] > nsp[0]) == ex.nsp_label as usize;
            Ok((loss, correct, out.mlm_positions.len(), nsp_loss, nsp_ok))
        },
    )?;
    let (mut loss, mut correct, mut count, mut nsp_loss, mut nsp_ok) = (0.0, 0, 0, 0.0, 0);
    for (l, c, n, nl, ok) in per_example {
        loss += l;
        correct += c;
        count += n;
        nsp_loss += nl;
        nsp_ok += usize::from(ok);
    }
    if count == 0 {
        return Err(Error::NoMlmTargets);
    }
    let n = dataset.len() as f64;
    Ok(PretrainMetrics {
        mlm_loss: loss / count as f64,
        mlm_accuracy: correct as f64 / count as f64,
        nsp_loss: nsp_loss / n,
        nsp_accuracy: nsp_ok as f64 / n,
    })
}
