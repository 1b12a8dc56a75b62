use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, TubeBuilder, VideoPredictions};
use crate::architecture::{forward_clip, init_tracklet_state, ClipPredictions, Model};
use crate::numerics::{Graph, Tensor};
use crate::synthvideo::Video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub clip_len: usize,
    /// A slot predicting background for this many consecutive clips restarts
    /// from the learned initial query.
    pub reinit_after: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { clip_len: 8, reinit_after: 2 }
    }
}

/// Predictions of one clip whose first frame is `start`.
#[derive(Clone, Debug)]
pub struct ClipResult {
    pub start: usize,
    pub predictions: ClipPredictions,
}

/// What went into and came out of one clip during inference.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub start: usize,
    pub len: usize,
    /// Queries `[N,T,C]` the clip started from.
    pub input_queries: Tensor,
    /// Slots restarted from the initial query at this clip's input.
    pub reinitialised: Vec<bool>,
    /// Identity carried by each slot in this clip.
    pub identities: Vec<usize>,
    /// Slots predicting background on a strict majority of frames.
    pub background: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub predictions: VideoPredictions,
    pub clips: Vec<ClipRecord>,
}

fn clip_bounds(frames: usize, clip_len: usize) -> Vec<(usize, usize)> {
    (0..frames).step_by(clip_len).map(|s| (s, clip_len.min(frames - s))).collect()
}

fn repeat_rows(x: &Tensor, t: usize) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(n * t * c);
    for row in x.data().chunks(c) {
        for _ in 0..t {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![n, t, c], data).expect("sized above")
}

/// Queries for the next clip: the time-mean of `final_queries` `[N,T,C]`,
/// with `reset` slots replaced by `initial` `[N,C]`, repeated `t` times.
pub fn handoff_queries(final_queries: &Tensor, initial: &Tensor, reset: &[bool], t: usize) -> Tensor {
    let &[n, tq, c] = final_queries.shape() else { panic!("queries must be [N,T,C]") };
    let mut mean = vec![0.0; n * c];
    for i in 0..n {
        let dst = &mut mean[i * c..(i + 1) * c];
        if reset[i] {
            dst.copy_from_slice(&initial.data()[i * c..(i + 1) * c]);
            continue;
        }
        for s in 0..tq {
            let src = &final_queries.data()[(i * tq + s) * c..(i * tq + s + 1) * c];
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v / tq as f64);
        }
    }
    repeat_rows(&Tensor::new(vec![n, c], mean).expect("sized above"), t)
}

fn run_clip(model: &Model, video: &Video, frames: &[usize], queries: &Tensor) -> Result<ClipPredictions> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let x = g.constant(video.frames_tensor_at(frames));
    let (_, proposals) = init_tracklet_state(&mut g, &p, frames.len(), video.frame_w as f64, video.frame_h as f64)?;
    let q = g.constant(queries.clone());
    let out = forward_clip(&mut g, &p, &model.config, x, q, proposals)?;
    Ok(out.predictions(&mut g)?)
}

fn initial_query(model: &Model) -> &Tensor {
    model.params.get("init.query").expect("model has an initial query")
}

fn background_majority(p: &ClipPredictions, slot: usize) -> bool {
    let (t_len, k1) = (p.class_probs.shape()[1], p.class_probs.shape()[2]);
    let bg = (0..t_len)
        .filter(|&t| {
            let row = &p.class_probs.data()[(slot * t_len + t) * k1..(slot * t_len + t + 1) * k1];
            let arg = row.iter().enumerate().fold(0, |a, (k, &v)| if v > row[a] { k } else { a });
            arg == k1 - 1
        })
        .count();
    2 * bg > t_len
}

/// Clip-by-clip inference where each clip starts from the previous clip's
/// time-averaged output queries. Slot `i` keeps one identity until it is
/// restarted, so identities follow from the query path alone.
pub fn infer_video_traced(model: &Model, video: &Video, cfg: &InferConfig) -> Result<Inference> {
    let num_frames = video.num_frames();
    if num_frames == 0 {
        return Err(PipelineError::EmptyVideo);
    }
    if cfg.clip_len == 0 || cfg.reinit_after == 0 {
        return Err(PipelineError::Config("clip_len and reinit_after must be positive".into()));
    }
    let n = model.config.queries;
    let classes = model.config.num_classes + 1;
    let init = initial_query(model);
    let bounds = clip_bounds(num_frames, cfg.clip_len);

    let mut identities: Vec<usize> = (0..n).collect();
    let mut tubes: Vec<TubeBuilder> = (0..n).map(|i| TubeBuilder::new(i, 0, classes)).collect();
    let mut background_run = vec![0usize; n];
    let mut reinitialised = vec![false; n];
    let mut queries = repeat_rows(init, bounds[0].1);
    let mut clips = Vec::with_capacity(bounds.len());
    for (c, &(start, len)) in bounds.iter().enumerate() {
        let frames: Vec<usize> = (start..start + len).collect();
        let predictions = run_clip(model, video, &frames, &queries)?;
        let clip = ClipResult { start, predictions };
        for i in 0..n {
            tubes[identities[i]].extend(&clip);
        }
        let background: Vec<bool> = (0..n).map(|i| background_majority(&clip.predictions, i)).collect();
        clips.push(ClipRecord {
            start,
            len,
            input_queries: std::mem::replace(&mut queries, Tensor::zeros(&[0])),
            reinitialised: reinitialised.clone(),
            identities: identities.clone(),
            background: background.clone(),
        });
        let Some(&(next_start, next_len)) = bounds.get(c + 1) else { break };
        for i in 0..n {
            background_run[i] = if background[i] { background_run[i] + 1 } else { 0 };
            reinitialised[i] = background_run[i] >= cfg.reinit_after;
            if reinitialised[i] {
                background_run[i] = 0;
                identities[i] = tubes.len();
                tubes.push(TubeBuilder::new(i, next_start, classes));
            }
        }
        queries = handoff_queries(&clip.predictions.queries, init, &reinitialised, next_len);
    }
    let px = video.frame_h * video.frame_w;
    let instances = tubes.into_iter().enumerate().map(|(id, t)| t.finish(id, num_frames, px)).collect();
    Ok(Inference {
        predictions: VideoPredictions {
            video: video.index,
            frame_h: video.frame_h,
            frame_w: video.frame_w,
            num_frames,
            instances,
        },
        clips,
    })
}

pub fn infer_video(model: &Model, video: &Video, cfg: &InferConfig) -> Result<VideoPredictions> {
    Ok(infer_video_traced(model, video, cfg)?.predictions)
}

/// Every clip run on its own from the learned initial state.
pub fn infer_clips(model: &Model, video: &Video, clip_len: usize) -> Result<Vec<ClipResult>> {
    if video.num_frames() == 0 {
        return Err(PipelineError::EmptyVideo);
    }
    if clip_len == 0 {
        return Err(PipelineError::Config("clip_len must be positive".into()));
    }
    let init = initial_query(model);
    clip_bounds(video.num_frames(), clip_len)
        .into_iter()
        .map(|(start, len)| {
            let frames: Vec<usize> = (start..start + len).collect();
            let predictions = run_clip(model, video, &frames, &repeat_rows(init, len))?;
            Ok(ClipResult { start, predictions })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_cover_the_video_with_a_short_tail() {
        assert_eq!(clip_bounds(20, 8), vec![(0, 8), (8, 8), (16, 4)]);
        assert_eq!(clip_bounds(5, 8), vec![(0, 5)]);
    }

    #[test]
    fn handoff_rows_are_time_means_or_initial() {
        let q = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let init = Tensor::new(vec![2, 2], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let h = handoff_queries(&q, &init, &[false, true], 3);
        assert_eq!(h.shape(), &[2, 3, 2]);
        assert_eq!(&h.data()[..6], &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
        assert_eq!(&h.data()[6..], &[-3.0, -4.0, -3.0, -4.0, -3.0, -4.0]);
    }

    #[test]
    fn handoff_path_has_no_association() {
        let src = include_str!("infer.rs");
        let body = &src[..src.find("#[cfg(test)]").unwrap()];
        for word in ["hungarian", "affinity", "link", "box_iou", "mask_iou", "video_iou", "nms", "velocity"] {
            assert!(!body.to_lowercase().contains(word), "inference path mentions {word}");
        }
    }
}
