//! Classification and QA metrics and task evaluation.

mod metrics;
mod task;

pub use metrics::*;
pub use task::*;
