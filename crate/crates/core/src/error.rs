//! Crate-wide error type.

use crate::tensor::Shape;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors fed to an op whose shapes must agree.
    #[error("{op}: shape mismatch {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    /// Any other violated precondition on an operation argument.
    #[error("{0}")]
    InvalidArgument(String),

    /// A network spec that cannot be built.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    /// Configuration rejected before any work started.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset loading or preprocessing failure.
    #[error("dataset error: {0}")]
    Data(String),

    /// Checkpoint container could not be written or read back.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Optimizer step requested before a gradient was produced.
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    /// Training aborted because the loss left the finite range.
    #[error("non-finite loss at epoch {epoch}, batch {batch}, lr {lr}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    /// Replicas were expected to hold bitwise-identical parameters.
    #[error("replica parameters diverged before synchronization")]
    ReplicaDivergence,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
