pub mod corpus;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrain_data;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
