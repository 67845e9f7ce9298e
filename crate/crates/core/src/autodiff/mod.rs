//! Dense tensors, a reverse-mode tape, SGD with warmup and step decay, and checkpoints.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use optim::{lr_at, sgd_step, ParamId, ParamStore, Parameter, Sgd, SgdConfig};
pub use tape::{BnMode, BnStats, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

/// Batch-norm running statistics use `new = (1 − momentum)·old + momentum·batch`.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error in {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("parameter `{0}` has no gradient")]
    StaleGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests;
