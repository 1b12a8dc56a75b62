use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, clip_step, correspondence_step, step_decay, AdamW, ClipRef, LossWeights, Result, StepOptions, TrainError};
use crate::architecture::{AttentionScheme, DynamicConvMode, Model, ModelConfig, QueryMode};
use crate::synthvideo::{Video, VideoDataset};

/// How the two clips of a correspondence step are placed in the video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSampling {
    /// The second clip starts right after the first, as in inference.
    Adjacent,
    /// Any two disjoint clips, in either order.
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub clip_len: usize,
    pub iterations: usize,
    pub queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// One epoch is one step per training video.
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub loss_weights: LossWeights,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Train on clip pairs with query handoff; otherwise on single clips.
    pub correspondence: bool,
    pub pair_sampling: PairSampling,
    /// Frame strides sampled per step, for frame-rate augmentation.
    pub strides: Vec<usize>,
    pub match_per_iteration: bool,
    pub attention: AttentionScheme,
    pub dynamic_conv: DynamicConvMode,
    pub query_mode: QueryMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clip_len: 8,
            iterations: 3,
            queries: 6,
            channels: 64,
            heads: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 375,
            lr_drop_epoch: 300,
            loss_weights: LossWeights::default(),
            grad_clip: 1.0,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            correspondence: true,
            pair_sampling: PairSampling::Adjacent,
            strides: vec![1],
            match_per_iteration: false,
            attention: AttentionScheme::Factorised,
            dynamic_conv: DynamicConvMode::Temporal,
            query_mode: QueryMode::PerFrame,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            queries: self.queries,
            iterations: self.iterations,
            heads: self.heads,
            num_classes,
            attention: self.attention,
            dynamic_conv: self.dynamic_conv,
            query_mode: self.query_mode,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.epochs == 0 {
            return Err(TrainError::Config("clip_len and epochs must be positive".into()));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(TrainError::Config("strides must be a non-empty list of positive values".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Progress of one optimisation step.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub video: usize,
    pub stride: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Samples the frames of one training step from a video of `len` frames:
/// a stride and phase, then two clips placed by `pairing`, or one clip when
/// `pairing` is `None`. Clips are at most `clip_len` frames.
pub fn sample_clips(
    rng: &mut impl Rng,
    len: usize,
    clip_len: usize,
    strides: &[usize],
    pairing: Option<PairSampling>,
) -> (usize, Vec<Vec<usize>>) {
    let mut stride = strides[rng.gen_range(0..strides.len())];
    if len.div_ceil(stride) < 2 {
        stride = 1;
    }
    let phase = rng.gen_range(0..stride.min(len));
    let avail: Vec<usize> = (phase..len).step_by(stride).collect();
    let l = avail.len();
    if let (Some(pairing), true) = (pairing, l >= 2) {
        let t = clip_len.min(l / 2);
        let a = rng.gen_range(0..=l - 2 * t);
        let clips = match pairing {
            PairSampling::Adjacent => vec![avail[a..a + t].to_vec(), avail[a + t..a + 2 * t].to_vec()],
            PairSampling::Any => {
                let b = rng.gen_range(a + t..=l - t);
                let mut clips = vec![avail[a..a + t].to_vec(), avail[b..b + t].to_vec()];
                if rng.gen_bool(0.5) {
                    clips.swap(0, 1);
                }
                clips
            }
        };
        (stride, clips)
    } else {
        let t = clip_len.min(l);
        let a = rng.gen_range(0..=l - t);
        (stride, vec![avail[a..a + t].to_vec()])
    }
}

/// Trains a fresh model on `dataset`. `on_step` sees every step.
pub fn train(cfg: &TrainConfig, dataset: &VideoDataset, mut on_step: impl FnMut(&StepLog)) -> Result<Model> {
    cfg.validate()?;
    if dataset.videos.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut model = Model::new(cfg.model_config(dataset.num_classes()), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let opts = StepOptions { weights: cfg.loss_weights, match_per_iteration: cfg.match_per_iteration };
    let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.lr = step_decay(cfg.lr, epoch, cfg.lr_drop_epoch);
        order.shuffle(&mut rng);
        for &vi in &order {
            let video: &Video = &dataset.videos[vi];
            let (stride, clips) = sample_clips(&mut rng, video.num_frames(), cfg.clip_len, &cfg.strides, cfg.correspondence.then_some(cfg.pair_sampling));
            let out = match clips.as_slice() {
                [a, b] => correspondence_step(
                    &model,
                    ClipRef { video, frames: a },
                    ClipRef { video, frames: b },
                    &opts,
                )?,
                [a] => clip_step(&model, ClipRef { video, frames: a }, &opts)?,
                _ => unreachable!("one or two clips"),
            };
            let mut grads = out.grads;
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(model.params.tensors_mut(), &grads);
            on_step(&StepLog { step, epoch, video: vi, stride, lr: opt.lr, loss: out.loss, grad_norm });
            step += 1;
        }
    }
    Ok(model)
}
