use serde::{Deserialize, Serialize};

use super::{ClipResult, Result, TubeBuilder, VideoPredictions};
use crate::numerics::losses::box_iou;
use crate::training::{hungarian, mask_iou};

/// Weights of the boundary-frame affinity and the linking threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub box_iou: f64,
    pub box_l1: f64,
    pub mask_iou: f64,
    pub class_agreement: f64,
    /// Pairs with affinity below this start a new identity.
    pub threshold: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { box_iou: 1.0, box_l1: 1.0, mask_iou: 1.0, class_agreement: 1.0, threshold: 1.0 }
    }
}

struct Boundary<'a> {
    probs: &'a [f64],
    bbox: [f64; 4],
    mask: &'a [f64],
}

fn boundary(clip: &ClipResult, slot: usize, t: usize) -> Boundary<'_> {
    let p = &clip.predictions;
    let (t_len, k1) = (p.class_probs.shape()[1], p.class_probs.shape()[2]);
    let px = p.masks.shape()[2] * p.masks.shape()[3];
    let row = slot * t_len + t;
    let b = &p.boxes.data()[row * 4..row * 4 + 4];
    Boundary {
        probs: &p.class_probs.data()[row * k1..(row + 1) * k1],
        bbox: [b[0], b[1], b[2], b[3]],
        mask: &p.masks.data()[row * px..(row + 1) * px],
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |a, (k, &x)| if x > v[a] { k } else { a })
}

/// Affinity of slot `a` at the last frame of `prev` and slot `b` at the first
/// frame of `next`: weighted box IoU, negated corner L1 over the frame size,
/// mask IoU, and agreement of the foreground argmax class.
pub fn link_affinity(prev: &ClipResult, a: usize, next: &ClipResult, b: usize, cfg: &LinkConfig) -> f64 {
    let t_last = prev.predictions.class_probs.shape()[1] - 1;
    let (x, y) = (boundary(prev, a, t_last), boundary(next, b, 0));
    let (h, w) = (prev.predictions.masks.shape()[2] as f64, prev.predictions.masks.shape()[3] as f64);
    let scale = [w, h, w, h];
    let l1: f64 = (0..4).map(|k| (x.bbox[k] - y.bbox[k]).abs() / scale[k]).sum::<f64>() / 4.0;
    let bg = x.probs.len() - 1;
    let (cx, cy) = (argmax(x.probs), argmax(y.probs));
    let agree = cx == cy && cx != bg;
    cfg.box_iou * box_iou(&x.bbox, &y.bbox) - cfg.box_l1 * l1
        + cfg.mask_iou * mask_iou(x.mask, y.mask)
        + cfg.class_agreement * agree as u8 as f64
}

/// Video predictions from independently inferred clips, linking slots across
/// each clip boundary by Hungarian matching on [`link_affinity`].
pub fn handcrafted_link_baseline(video: usize, clips: &[ClipResult], cfg: &LinkConfig) -> Result<VideoPredictions> {
    let first = clips.first().ok_or(super::PipelineError::EmptyVideo)?;
    let shape = first.predictions.masks.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let classes = first.predictions.class_probs.shape()[2];
    let num_frames = clips.iter().map(|c| c.start + c.predictions.class_probs.shape()[1]).max().unwrap_or(0);

    let mut identities: Vec<usize> = (0..n).collect();
    let mut tubes: Vec<TubeBuilder> = (0..n).map(|i| TubeBuilder::new(i, first.start, classes)).collect();
    for tube in &mut tubes {
        tube.extend(first);
    }
    for pair in clips.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let affinity: Vec<Vec<f64>> = (0..n).map(|b| (0..n).map(|a| link_affinity(prev, a, next, b, cfg)).collect()).collect();
        let cost: Vec<Vec<f64>> = affinity.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let assignment = hungarian(&cost).map_err(|e| super::PipelineError::Config(e.to_string()))?;
        let mut next_ids = vec![usize::MAX; n];
        for &(b, a) in &assignment.pairs {
            if affinity[b][a] >= cfg.threshold {
                next_ids[b] = identities[a];
            }
        }
        for (b, id) in next_ids.iter_mut().enumerate() {
            if *id == usize::MAX {
                *id = tubes.len();
                tubes.push(TubeBuilder::new(b, next.start, classes));
            }
            tubes[*id].slot = b;
            tubes[*id].extend(next);
        }
        identities = next_ids;
    }
    let instances = tubes.into_iter().enumerate().map(|(id, t)| t.finish(id, num_frames, h * w)).collect();
    Ok(VideoPredictions { video, frame_h: h, frame_w: w, num_frames, instances })
}
