//! Binary checkpoint format.
//!
//! ```text
//! magic "DLMCKPT1" | u32 version | u32 header length | JSON header
//! u32 tensor count | tensor records
//! record: u32 name length | name | u32 ndim | u32 dims... | f32 values
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments are stored as
//! tensors named `adam.m.<name>` and `adam.v.<name>`.

use super::adam::OptimizerState;
use super::config::TrainConfig;
use crate::datasets::TaskKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, Tensor};
use crate::tokenizer::Vocab;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One optimizer step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: String,
}

/// A dev-set evaluation during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Parameters<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: usize,
    /// Task whose head was last trained; `None` after pretraining.
    pub task: Option<TaskKind>,
    pub label_set: Option<Vec<String>>,
    pub loss_history: Vec<StepLog>,
    pub metric_history: Vec<MetricPoint>,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, params: Parameters<f32>) -> Self {
        let optimizer = OptimizerState::for_params(&params);
        Checkpoint {
            model_config,
            train_config,
            params,
            optimizer,
            step: 0,
            task: None,
            label_set: None,
            loss_history: Vec::new(),
            metric_history: Vec::new(),
            vocab: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    optimizer_step: u64,
    task: Option<TaskKind>,
    label_set: Option<Vec<String>>,
    loss_history: Vec<StepLog>,
    metric_history: Vec<MetricPoint>,
    vocab: Option<Vec<String>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out = ckpt.params.named();
    out.extend(ckpt.optimizer.m.named().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
    out.extend(ckpt.optimizer.v.named().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.step,
        task: ckpt.task,
        label_set: ckpt.label_set.clone(),
        loss_history: ckpt.loss_history.clone(),
        metric_history: ckpt.metric_history.clone(),
        vocab: ckpt.vocab.as_ref().map(|v| v.tokens().to_vec()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 12 * ckpt.params.num_elements() + 1024);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    let list = tensors(ckpt);
    put_u32(&mut out, list.len());
    for (name, t) in list {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut out, d);
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let config = header.model_config;
    config.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let vocab = header
        .vocab
        .map(Vocab::from_tokens)
        .transpose()
        .map_err(|e| Error::CorruptCheckpoint(format!("vocabulary: {e}")))?;
    let mut ckpt = Checkpoint::new(config.clone(), header.train_config, Parameters::zeros(&config));
    ckpt.step = header.step;
    ckpt.optimizer.step = header.optimizer_step;
    ckpt.task = header.task;
    ckpt.label_set = header.label_set;
    ckpt.loss_history = header.loss_history;
    ckpt.metric_history = header.metric_history;
    ckpt.vocab = vocab;

    let count = r.u32()?;
    {
        let mut slots: Vec<(String, &mut Tensor<f32>)> = ckpt.params.named_mut();
        slots.extend(ckpt.optimizer.m.named_mut().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
        slots.extend(ckpt.optimizer.v.named_mut().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        if count != slots.len() {
            return Err(Error::CorruptCheckpoint(format!("{count} tensors, expected {}", slots.len())));
        }
        for (expected, t) in slots {
            let name_len = r.u32()?;
            let name = r.take(name_len)?;
            if name != expected.as_bytes() {
                return Err(Error::CorruptCheckpoint(format!("expected tensor {expected}")));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if shape != t.shape {
                return Err(Error::CorruptCheckpoint(format!("tensor {expected} has shape {shape:?}")));
            }
            let raw = r.take(4 * t.data.len())?;
            for (x, b) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(ckpt)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
