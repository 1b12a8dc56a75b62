//! Dense `f64` tensors, a reverse-mode tape, and the differentiable kernels
//! the model is built from.

pub mod attention;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod losses;
mod ops;
mod tensor;

pub use attention::{multi_head_attention, multi_head_self_attention, AttentionWeights};
pub use gradcheck::{grad_check, grad_check_largest, grad_check_subset, relative_error, GradCheckReport};
pub use graph::{BackwardArgs, BackwardFn, Gradients, Graph, Var};
pub use kernels::{BoxCorners, Padding};
pub use tensor::{numel, strides, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate softmax axis")]
    DegenerateSoftmax,
    #[error("degenerate RoI: {0}")]
    DegenerateRoi(String),
    #[error("channel mismatch: filter expects {expected}, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
