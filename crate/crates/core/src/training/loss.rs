use serde::{Deserialize, Serialize};

use super::{Assignment, Result, TrainError};
use crate::architecture::IterationOutputs;
use crate::numerics::losses::giou;
use crate::numerics::{BoxCorners, Graph, Tensor, Var};
use crate::synthvideo::Video;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 2.0, l1: 5.0, giou: 2.0, ce: 5.0, dice: 5.0 }
    }
}

/// Loss terms of one clip and iteration, each averaged over its own entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_term: f64,
    pub box_l1_term: f64,
    pub box_giou_term: f64,
    pub mask_ce_term: f64,
    pub dice_term: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.class_term += o.class_term;
        self.box_l1_term += o.box_l1_term;
        self.box_giou_term += o.box_giou_term;
        self.mask_ce_term += o.mask_ce_term;
        self.dice_term += o.dice_term;
        self.total += o.total;
    }
}

/// Ground truth of one instance over the frames of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTube {
    /// Index of the tracklet in its video.
    pub tracklet: usize,
    pub instance_id: u32,
    pub classes: Vec<Option<usize>>,
    pub boxes: Vec<Option<BoxCorners>>,
    /// Binary masks `[T][H*W]` as 0/1 values.
    pub masks: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipTargets {
    pub frame_h: usize,
    pub frame_w: usize,
    pub gts: Vec<GtTube>,
}

impl ClipTargets {
    /// Targets for `tracklets` of `video` over the listed frames.
    pub fn from_video(video: &Video, frames: &[usize], tracklets: &[usize]) -> Self {
        let gts = tracklets
            .iter()
            .map(|&k| {
                let tr = &video.tracklets[k];
                GtTube {
                    tracklet: k,
                    instance_id: tr.instance_id,
                    classes: frames.iter().map(|&t| tr.class_per_frame[t]).collect(),
                    boxes: frames.iter().map(|&t| tr.box_per_frame[t]).collect(),
                    masks: frames
                        .iter()
                        .map(|&t| video.mask(k, t).into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect())
                        .collect(),
                }
            })
            .collect();
        Self { frame_h: video.frame_h, frame_w: video.frame_w, gts }
    }

    /// Tracklets of `video` visible in at least one of `frames`.
    pub fn visible_tracklets(video: &Video, frames: &[usize]) -> Vec<usize> {
        (0..video.tracklets.len())
            .filter(|&k| frames.iter().any(|&t| video.tracklets[k].is_visible(t)))
            .collect()
    }
}

/// `λ_L1·Σ|b - b̂|` over corners divided by the frame size, plus `λ_giou·(1 - GIoU)`.
pub fn box_loss(b: &BoxCorners, target: &BoxCorners, frame_w: f64, frame_h: f64, w: &LossWeights) -> f64 {
    let scale = [frame_w, frame_h, frame_w, frame_h];
    let l1: f64 = (0..4).map(|k| (b[k] - target[k]).abs() / scale[k]).sum();
    w.l1 * l1 + w.giou * (1.0 - giou(b, target))
}

/// IoU of two masks binarized at 0.5; empty against empty is 0.
pub fn mask_iou(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One prediction slot's values over a clip.
#[derive(Clone, Copy, Debug)]
pub struct SlotView<'a> {
    /// `[T, K+1]` class probabilities, background last.
    pub probs: &'a [f64],
    /// `[T, 4]`.
    pub boxes: &'a [f64],
    /// `[T, H*W]` mask probabilities.
    pub masks: &'a [f64],
}

/// `Σ_t -p(ĉ) + [ĉ ≠ ∅]·(box_loss - mask IoU)`.
pub fn match_cost(pred: SlotView<'_>, gt: &GtTube, frame_w: f64, frame_h: f64, w: &LossWeights) -> f64 {
    let t_len = gt.classes.len();
    let k1 = pred.probs.len() / t_len;
    let px = pred.masks.len() / t_len;
    let mut cost = 0.0;
    for t in 0..t_len {
        let probs = &pred.probs[t * k1..(t + 1) * k1];
        match gt.classes[t] {
            None => cost -= probs[k1 - 1],
            Some(c) => {
                cost -= probs[c];
                let b = &pred.boxes[t * 4..t * 4 + 4];
                let target = gt.boxes[t].expect("visible frame has a box");
                cost += box_loss(&[b[0], b[1], b[2], b[3]], &target, frame_w, frame_h, w);
                cost -= mask_iou(&pred.masks[t * px..(t + 1) * px], &gt.masks[t]);
            }
        }
    }
    cost
}

/// Plain values of an iteration's outputs, for matching.
pub struct IterationValues {
    pub n: usize,
    pub t: usize,
    pub probs: Vec<f64>,
    pub boxes: Vec<f64>,
    pub masks: Vec<f64>,
}

impl IterationValues {
    pub fn read(g: &Graph, out: &IterationOutputs, n: usize, t: usize) -> Self {
        let logits = g.value(out.class_logits);
        let k1 = logits.shape()[1];
        let mut probs = logits.data().to_vec();
        for row in probs.chunks_mut(k1) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
        }
        Self { n, t, probs, boxes: g.value(out.boxes).data().to_vec(), masks: g.value(out.masks).data().to_vec() }
    }

    pub fn slot(&self, i: usize) -> SlotView<'_> {
        let (k1, px) = (self.probs.len() / (self.n * self.t), self.masks.len() / (self.n * self.t));
        let rows = i * self.t..(i + 1) * self.t;
        SlotView {
            probs: &self.probs[rows.start * k1..rows.end * k1],
            boxes: &self.boxes[rows.start * 4..rows.end * 4],
            masks: &self.masks[rows.start * px..rows.end * px],
        }
    }

    /// `cost[pred][gt]`.
    pub fn cost_matrix(&self, targets: &ClipTargets, w: &LossWeights) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                targets
                    .gts
                    .iter()
                    .map(|gt| match_cost(self.slot(i), gt, targets.frame_w as f64, targets.frame_h as f64, w))
                    .collect()
            })
            .collect()
    }
}

/// Loss of one iteration's outputs (`N*T` rows, row `i*T + t`) under `assignment`.
pub fn clip_loss(
    g: &mut Graph,
    out: &IterationOutputs,
    targets: &ClipTargets,
    assignment: &Assignment,
    n: usize,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    assignment.validate(n, targets.gts.len())?;
    let rows = g.shape(out.class_logits)[0];
    let background = g.shape(out.class_logits)[1] - 1;
    if !rows.is_multiple_of(n) {
        return Err(TrainError::Assignment(format!("{rows} rows for {n} predictions")));
    }
    let t_len = rows / n;
    if targets.gts.iter().any(|gt| gt.classes.len() != t_len) {
        return Err(TrainError::Assignment("targets and predictions differ in clip length".into()));
    }
    let (fw, fh) = (targets.frame_w as f64, targets.frame_h as f64);
    let px = targets.frame_h * targets.frame_w;

    let mut class_targets = vec![background; rows];
    let (mut vis_rows, mut vis_boxes, mut vis_masks) = (Vec::new(), Vec::new(), Vec::new());
    let (mut all_rows, mut all_masks) = (Vec::new(), Vec::new());
    for &(p, j) in &assignment.pairs {
        let gt = &targets.gts[j];
        for t in 0..t_len {
            let row = p * t_len + t;
            all_rows.push(row);
            all_masks.extend_from_slice(&gt.masks[t]);
            if let Some(c) = gt.classes[t] {
                class_targets[row] = c;
                vis_rows.push(row);
                vis_boxes.push(gt.boxes[t].expect("visible frame has a box"));
                vis_masks.extend_from_slice(&gt.masks[t]);
            }
        }
    }

    let nll = g.cross_entropy(out.class_logits, &class_targets)?;
    let class_term = g.mean(nll);
    let mut total = g.mul_scalar(class_term, w.class);
    let mut breakdown = LossBreakdown { class_term: g.value(class_term).item(), ..Default::default() };

    if !vis_rows.is_empty() {
        let v = vis_rows.len();
        let sel = g.index_select(out.boxes, &vis_rows)?;
        let tgt = g.constant(Tensor::new(vec![v, 4], vis_boxes.iter().flatten().copied().collect())?);
        let diff = g.sub(sel, tgt)?;
        let inv = g.constant(Tensor::new(vec![v, 4], [1.0 / fw, 1.0 / fh, 1.0 / fw, 1.0 / fh].repeat(v))?);
        let diff = g.mul(diff, inv)?;
        let l1 = g.abs(diff);
        let l1 = g.sum(l1);
        let l1 = g.mul_scalar(l1, 1.0 / v as f64);
        let gl = g.giou_loss(sel, &vis_boxes)?;
        let gl = g.mean(gl);

        let masks = g.index_select(out.masks, &vis_rows)?;
        let masks = g.reshape(masks, &[v, px])?;
        let dice = g.dice_loss(masks, &Tensor::new(vec![v, px], vis_masks)?)?;
        let dice = g.mean(dice);

        breakdown.box_l1_term = g.value(l1).item();
        breakdown.box_giou_term = g.value(gl).item();
        breakdown.dice_term = g.value(dice).item();
        for (term, weight) in [(l1, w.l1), (gl, w.giou), (dice, w.dice)] {
            let s = g.mul_scalar(term, weight);
            total = g.add(total, s)?;
        }
    }
    if !all_rows.is_empty() {
        let a = all_rows.len();
        let masks = g.index_select(out.masks, &all_rows)?;
        let masks = g.reshape(masks, &[a, px])?;
        let ce = g.binary_cross_entropy(masks, &Tensor::new(vec![a, px], all_masks)?)?;
        let ce = g.mean(ce);
        breakdown.mask_ce_term = g.value(ce).item();
        let s = g.mul_scalar(ce, w.ce);
        total = g.add(total, s)?;
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}
