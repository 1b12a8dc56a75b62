//! Clip-by-clip video inference, video-level evaluation, the box/mask
//! linking baseline, and overlay rendering.

mod ablate;
mod infer;
mod link;
mod metrics;
mod render;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::numerics::{BoxCorners, NumericsError};
use crate::synthvideo::SynthError;

pub use ablate::{run_ablation, AblationConfig, AblationReport};
pub use infer::{
    handoff_queries, infer_clips, infer_video, infer_video_traced, ClipRecord, ClipResult, InferConfig, Inference,
};
pub use link::{handcrafted_link_baseline, link_affinity, LinkConfig};
pub use metrics::{evaluate, identity_continuity, video_iou, Metrics, IOU_THRESHOLDS};
pub use render::{identity_color, render_overlays};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// One predicted identity over a whole video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInstance {
    pub identity: usize,
    /// Query slot that produced the identity.
    pub slot: usize,
    /// Frames `first..last` covered by the identity.
    pub first_frame: usize,
    pub last_frame: usize,
    /// Foreground class with the highest mean probability over the covered frames.
    pub class: usize,
    /// Mean probability of `class` over the covered frames.
    pub score: f64,
    /// Binary masks `[T][H*W]` over all frames; empty outside the covered frames.
    #[serde(skip)]
    pub masks: Vec<Vec<bool>>,
    /// Predicted box per frame; `None` outside the covered frames.
    pub boxes: Vec<Option<BoxCorners>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub num_frames: usize,
    pub instances: Vec<VideoInstance>,
}

/// Per-frame outputs of one identity, accumulated clip by clip.
#[derive(Clone, Debug)]
pub(crate) struct TubeBuilder {
    slot: usize,
    first: usize,
    last: usize,
    prob_sum: Vec<f64>,
    masks: Vec<(usize, Vec<bool>)>,
    boxes: Vec<(usize, BoxCorners)>,
}

impl TubeBuilder {
    pub(crate) fn new(slot: usize, first: usize, classes: usize) -> Self {
        Self { slot, first, last: first, prob_sum: vec![0.0; classes], masks: Vec::new(), boxes: Vec::new() }
    }

    /// Appends slot `self.slot` of a clip starting at `start`.
    pub(crate) fn extend(&mut self, clip: &ClipResult) {
        let p = &clip.predictions;
        let (t_len, k1) = (p.class_probs.shape()[1], p.class_probs.shape()[2]);
        let px = p.masks.shape()[2] * p.masks.shape()[3];
        let i = self.slot;
        for t in 0..t_len {
            let probs = &p.class_probs.data()[(i * t_len + t) * k1..(i * t_len + t + 1) * k1];
            self.prob_sum.iter_mut().zip(probs).for_each(|(s, v)| *s += v);
            let m = &p.masks.data()[(i * t_len + t) * px..(i * t_len + t + 1) * px];
            self.masks.push((clip.start + t, m.iter().map(|&v| v > 0.5).collect()));
            let b = &p.boxes.data()[(i * t_len + t) * 4..(i * t_len + t) * 4 + 4];
            self.boxes.push((clip.start + t, [b[0], b[1], b[2], b[3]]));
        }
        self.last = clip.start + t_len;
    }

    pub(crate) fn finish(self, identity: usize, num_frames: usize, px: usize) -> VideoInstance {
        let frames = (self.last - self.first).max(1) as f64;
        let fg = self.prob_sum.len() - 1;
        let (class, sum) = self.prob_sum[..fg]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best });
        let mut masks = vec![vec![false; px]; num_frames];
        for (t, m) in self.masks {
            masks[t] = m;
        }
        let mut boxes = vec![None; num_frames];
        for (t, b) in self.boxes {
            boxes[t] = Some(b);
        }
        VideoInstance {
            identity,
            slot: self.slot,
            first_frame: self.first,
            last_frame: self.last,
            class,
            score: sum / frames,
            masks,
            boxes,
        }
    }
}
