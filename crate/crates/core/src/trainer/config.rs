use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Dev evaluation interval during fine-tuning.
    pub eval_every: usize,
    /// Periodic checkpoint interval; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Decoupled weight decay; off unless set.
    pub weight_decay: f64,
    /// Global gradient-norm clip; off unless set.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            max_seq_len: 128,
            total_steps: 2_000,
            warmup_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
            checkpoint_dir: None,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

pub const FINETUNE_LEARNING_RATE: f64 = 3e-5;
pub const FINETUNE_BATCH_SIZE: usize = 16;
pub const FINETUNE_EPOCHS: usize = 3;

impl TrainConfig {
    /// Fine-tuning defaults: learning rate 3e-5, batch 16, three epochs over
    /// `train_examples`, one dev evaluation per epoch.
    pub fn finetune(train_examples: usize) -> Self {
        let per_epoch = train_examples.div_ceil(FINETUNE_BATCH_SIZE).max(1);
        TrainConfig {
            learning_rate: FINETUNE_LEARNING_RATE,
            batch_size: FINETUNE_BATCH_SIZE,
            total_steps: FINETUNE_EPOCHS * per_epoch,
            eval_every: per_epoch,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad(format!("warmup_ratio {} outside (0, 1)", self.warmup_ratio));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_seq_len < 4 {
            return bad(format!("max_seq_len {} below 4", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon and weight_decay must be non-negative".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("max_grad_norm {c}"));
            }
        }
        Ok(())
    }

    /// Warmup length `W = ceil(warmup_ratio · total_steps)`. Products within
    /// 1e-9 of an integer count as that integer, so 0.07 · 100 gives 7.
    pub fn warmup_steps(&self) -> usize {
        let x = self.warmup_ratio * self.total_steps as f64;
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as usize
        } else {
            x.ceil() as usize
        }
    }
}

/// Linear warmup to the peak over `W` steps, then cosine annealing to 0 at
/// `total_steps`. Update number `k` (1-based) uses `lr_schedule(k)`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let total = config.total_steps;
    let w = config.warmup_steps();
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if total <= w {
        return lr;
    }
    let progress = (step.min(total) - w) as f64 / (total - w) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        let w = c.warmup_steps();
        assert_eq!(w, 20);
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(w, &c), 1e-4);
        assert!(lr_schedule(c.total_steps, &c) <= 1e-12 * c.learning_rate);
        assert!((lr_schedule(w - 1, &c) - 1e-4 * 19.0 / 20.0).abs() < 1e-18);
    }

    #[test]
    fn warmup_rounding() {
        let mut c = TrainConfig { total_steps: 100, warmup_ratio: 0.07, ..Default::default() };
        assert_eq!(c.warmup_steps(), 7);
        c.total_steps = 101;
        assert_eq!(c.warmup_steps(), 8);
        c.total_steps = 1;
        c.warmup_ratio = 0.01;
        assert_eq!(c.warmup_steps(), 1);
        assert_eq!(lr_schedule(1, &c), c.learning_rate);
    }

    #[test]
    fn finetune_defaults() {
        let c = TrainConfig::finetune(100);
        assert_eq!((c.learning_rate, c.batch_size, c.total_steps, c.eval_every), (3e-5, 16, 21, 7));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { warmup_ratio: 0.0, ..Default::default() },
            TrainConfig { warmup_ratio: 1.0, ..Default::default() },
            TrainConfig { total_steps: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { max_grad_norm: Some(0.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let c: TrainConfig = toml::from_str("learning_rate = 0.001\ntotal_steps = 10").unwrap();
        assert_eq!((c.learning_rate, c.total_steps, c.batch_size), (1e-3, 10, 128));
        assert!(toml::from_str::<TrainConfig>("learning_rat = 1").is_err());
    }
}
