//! Transformer encoder with MLM, NSP, classification and QA heads.

mod forward;
mod loss;
mod params;
pub mod tensor;

pub use forward::{backward, forward, forward_example, Cache, ForwardOptions, ForwardOutput, Heads, OutputGrads};
pub use loss::{
    batch_loss, batch_loss_and_grad, classification_loss, cross_entropy, cross_entropy_grad, heads_for, mlm_nsp_loss,
    mlm_positions, output_grads, qa_loss, LossParts, Normalizer, Sample, Target, GRAD_CHUNK,
};
pub use params::{
    param_count, Head, LayerParams, ModelConfig, Parameters, INIT_STD,
};
pub use tensor::{Scalar, Tensor};

/// Initial parameters for `config`, deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Parameters<f32> {
    Parameters::init(config, seed)
}
