//! Run configuration file. Every section is optional and every field falls
//! back to the owning module's default; paths are resolved against the
//! directory holding the file.

use dialbert::model::ModelConfig;
use dialbert::pretrain_data::MaskMode;
use dialbert::trainer::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Raw input, cleaned corpus, and the pretraining examples built from it.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub raw: Option<PathBuf>,
    pub path: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub max_seq_len: Option<usize>,
    pub mask_prob: Option<f64>,
    pub mask_mode: Option<MaskMode>,
    pub next_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab: Option<PathBuf>,
    pub vocab_size: Option<usize>,
    pub min_frequency: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Base,
    Tiny,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub profile: Option<Profile>,
    pub num_layers: Option<usize>,
    pub hidden_size: Option<usize>,
    pub num_heads: Option<usize>,
    pub intermediate_size: Option<usize>,
    pub max_positions: Option<usize>,
    pub num_segments: Option<usize>,
    pub dropout_prob: Option<f64>,
    pub layer_norm_eps: Option<f64>,
}

macro_rules! overlay {
    ($target:expr, $source:expr; $($field:ident),*) => {
        $(if let Some(v) = $source.$field.clone() { $target.$field = v; })*
    };
}

impl ModelSection {
    /// Profile defaults with the section's overrides applied.
    pub fn build(&self, profile: Option<Profile>, vocab_size: usize) -> ModelConfig {
        let mut c = match profile.or(self.profile).unwrap_or_default() {
            Profile::Base => ModelConfig::base(vocab_size),
            Profile::Tiny => ModelConfig { vocab_size, ..ModelConfig::tiny() },
        };
        overlay!(c, self; num_layers, hidden_size, num_heads, intermediate_size, max_positions, num_segments,
            dropout_prob, layer_norm_eps);
        c
    }
}

/// Same fields as [`TrainConfig`], all optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub total_steps: Option<usize>,
    pub warmup_ratio: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub weight_decay: Option<f64>,
    pub max_grad_norm: Option<f64>,
}

impl TrainSection {
    pub fn apply(&self, c: &mut TrainConfig) {
        overlay!(c, self; learning_rate, batch_size, max_seq_len, total_steps, warmup_ratio, beta1, beta2, epsilon,
            seed, eval_every, checkpoint_every, weight_decay);
        if self.checkpoint_dir.is_some() {
            c.checkpoint_dir = self.checkpoint_dir.clone();
        }
        if self.max_grad_norm.is_some() {
            c.max_grad_norm = self.max_grad_norm;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_answer_len: Option<usize>,
    pub label_set: Option<Vec<String>>,
    pub train_frac: Option<f64>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, dir: &Path) -> Result<Self, String> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        for p in [
            &mut c.corpus.raw,
            &mut c.corpus.path,
            &mut c.corpus.dataset,
            &mut c.tokenizer.vocab,
            &mut c.train.checkpoint_dir,
        ] {
            resolve(dir, p);
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, dir).map_err(|e| format!("{}: {e}", path.display()))
    }
}
