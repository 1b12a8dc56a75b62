//! Bipartite matching, the clip loss, the clip-pair correspondence step, and
//! the optimisation loop.

mod hungarian;
mod loss;
mod optimizer;
mod step;
mod trainer;

pub use hungarian::{hungarian, Assignment};
pub use loss::{
    box_loss, clip_loss, mask_iou, match_cost, ClipTargets, GtTube, IterationValues, LossBreakdown, LossWeights,
    SlotView,
};
pub use optimizer::{clip_grad_norm, step_decay, AdamW};
pub use step::{
    clip_step, clip_step_loss, correspondence_loss, correspondence_step, ClipRef, StepLoss, StepOptions, StepOutput,
};
pub use trainer::{sample_clips, train, PairSampling, StepLog, TrainConfig};

use crate::numerics::NumericsError;
use crate::synthvideo::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("non-finite matching cost")]
    NonFiniteCost,
    #[error("clips come from different videos ({0} and {1})")]
    VideoMismatch(usize, usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
