use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("vocab_size {requested} too small: need at least {required}")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("invalid vocab file: {0}")]
    InvalidVocab(String),
    #[error("max_seq_len {0} too small: need at least 3")]
    SeqLenTooSmall(usize),
    #[error("no NSP pairs available")]
    NoNspPairs,
    #[error("negative NSP sampling needs at least two documents with sentences")]
    NoNegativeSource,
    #[error("token id out of range: {id} >= vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no MLM targets")]
    NoMlmTargets,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("not a pretraining dataset")]
    NotADataset,
    #[error("corrupt pretraining dataset: {0}")]
    CorruptDataset(String),
    #[error("{0}")]
    EmptyInput(String),
    #[error("no valid span")]
    NoValidSpan,
    #[error("qa {id}: {reason}")]
    AnswerOffset { id: String, reason: String },
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
