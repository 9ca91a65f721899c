//! Optimization, training loops and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod loops;

pub use adam::{adam_step, adam_update, clip_grad_norm, grad_norm, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MetricPoint, StepLog,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{lr_schedule, TrainConfig, FINETUNE_BATCH_SIZE, FINETUNE_EPOCHS, FINETUNE_LEARNING_RATE};
pub use loops::{
    finetune, pretrain, sequential_transfer, FinetuneOutcome, StageReport, TransferOutcome, TransferStage,
};
