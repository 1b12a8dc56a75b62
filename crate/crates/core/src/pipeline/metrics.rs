use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, VideoPredictions};
use crate::synthvideo::Video;

/// Tube IoU thresholds `0.50, 0.55, ..., 0.95`.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    pub identity_continuity: f64,
}

/// `Σ_t |a ∩ b| / Σ_t |a ∪ b|` over two mask tubes; 0 when both are empty.
pub fn video_iou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(PipelineError::Shape("mask tubes differ in frames or size".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        for (&x, &y) in a.iter().zip(b) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

struct GtInstance {
    class: usize,
    masks: Vec<Vec<bool>>,
}

fn gt_instances(video: &Video) -> Vec<GtInstance> {
    video
        .tracklets
        .iter()
        .enumerate()
        .filter_map(|(k, tr)| {
            let class = tr.video_class()?;
            Some(GtInstance { class, masks: (0..video.num_frames()).map(|t| video.mask(k, t)).collect() })
        })
        .collect()
}

/// Detection of one class in one video, with its IoU against each ground truth.
struct Detection {
    video: usize,
    score: f64,
    order: usize,
    ious: Vec<(usize, f64)>,
}

/// 101-point interpolated average precision of a confidence-sorted TP/FP list.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            recall.iter().position(|&x| x >= r).map_or(0.0, |k| precision[k])
        })
        .sum::<f64>()
        / 101.0
}

/// Greedy confidence-ordered matching; each detection takes the unmatched
/// ground truth of highest IoU at or above `threshold`.
fn greedy_match(dets: &[&Detection], gt_used: &mut [Vec<bool>], threshold: f64) -> Vec<bool> {
    dets.iter()
        .map(|d| {
            let best = d
                .ious
                .iter()
                .filter(|&&(j, iou)| iou >= threshold && !gt_used[d.video][j])
                .fold(None, |best: Option<(usize, f64)>, &(j, iou)| match best {
                    Some((_, b)) if b >= iou => best,
                    _ => Some((j, iou)),
                });
            if let Some((j, _)) = best {
                gt_used[d.video][j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Video-level AP and AR over `preds[v]` against `gts[v]`. AP averages over
/// classes with at least one ground truth and over [`IOU_THRESHOLDS`]; AR@k
/// keeps the k most confident predictions per video and class.
pub fn evaluate(preds: &[VideoPredictions], gts: &[Video]) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(PipelineError::Shape(format!("{} prediction sets for {} videos", preds.len(), gts.len())));
    }
    let gt: Vec<Vec<GtInstance>> = gts.iter().map(gt_instances).collect();
    let num_classes = gt.iter().flatten().map(|g| g.class + 1).chain(preds.iter().flat_map(|p| p.instances.iter().map(|i| i.class + 1))).max().unwrap_or(0);

    let mut dets: Vec<Vec<Detection>> = (0..num_classes).map(|_| Vec::new()).collect();
    for (v, (p, g)) in preds.iter().zip(&gt).enumerate() {
        if p.num_frames != gts[v].num_frames() || p.frame_h * p.frame_w != gts[v].frame_h * gts[v].frame_w {
            return Err(PipelineError::Shape(format!("predictions for video {v} do not match its size")));
        }
        for (k, inst) in p.instances.iter().enumerate() {
            let ious = g
                .iter()
                .enumerate()
                .filter(|(_, gi)| gi.class == inst.class)
                .map(|(j, gi)| Ok((j, video_iou(&inst.masks, &gi.masks)?)))
                .collect::<Result<Vec<_>>>()?;
            dets[inst.class].push(Detection { video: v, score: inst.score, order: k, ious });
        }
    }

    let (mut ap, mut ap50, mut ap75, mut ar1, mut ar10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut counted = 0usize;
    for (c, class_dets) in dets.iter_mut().enumerate() {
        let num_gt = gt.iter().flatten().filter(|g| g.class == c).count();
        if num_gt == 0 {
            continue;
        }
        counted += 1;
        class_dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.video.cmp(&b.video)).then(a.order.cmp(&b.order)));
        let all: Vec<&Detection> = class_dets.iter().collect();
        let top = |k: usize| -> Vec<&Detection> {
            let mut per_video = vec![0usize; gts.len()];
            all.iter()
                .copied()
                .filter(|d| {
                    per_video[d.video] += 1;
                    per_video[d.video] <= k
                })
                .collect()
        };
        let (top1, top10) = (top(1), top(10));
        let fresh = || gt.iter().map(|g| vec![false; g.len()]).collect::<Vec<_>>();
        for (i, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let a = interpolated_ap(&greedy_match(&all, &mut fresh(), thr), num_gt);
            ap += a;
            if i == 0 {
                ap50 += a;
            }
            if i == 5 {
                ap75 += a;
            }
            let recall = |dets: &[&Detection]| {
                greedy_match(dets, &mut fresh(), thr).iter().filter(|&&t| t).count() as f64 / num_gt as f64
            };
            ar1 += recall(&top1);
            ar10 += recall(&top10);
        }
    }
    if counted == 0 {
        return Ok(Metrics { ap: 0.0, ap50: 0.0, ap75: 0.0, ar1: 0.0, ar10: 0.0, identity_continuity: identity_continuity(preds, gts)? });
    }
    let nt = (counted * IOU_THRESHOLDS.len()) as f64;
    Ok(Metrics {
        ap: ap / nt,
        ap50: ap50 / counted as f64,
        ap75: ap75 / counted as f64,
        ar1: ar1 / nt,
        ar10: ar10 / nt,
        identity_continuity: identity_continuity(preds, gts)?,
    })
}

/// Identity with the largest mask overlap with `gt` at frame `t`, if any overlaps.
fn identity_at(pred: &VideoPredictions, gt: &[bool], t: usize) -> Option<usize> {
    pred.instances
        .iter()
        .map(|inst| (inst.masks[t].iter().zip(gt).filter(|&(&a, &b)| a && b).count(), inst.identity))
        .filter(|&(overlap, _)| overlap > 0)
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, id)| id)
}

fn dominant(ids: impl Iterator<Item = Option<usize>>) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for id in ids.flatten() {
        *counts.entry(id).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(id, _)| id)
}

/// Fraction of ground-truth tracklets visible in both halves of their video
/// whose dominant predicted identity is the same in each half. 1 when no
/// tracklet qualifies.
pub fn identity_continuity(preds: &[VideoPredictions], gts: &[Video]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(PipelineError::Shape(format!("{} prediction sets for {} videos", preds.len(), gts.len())));
    }
    let (mut eligible, mut continuous) = (0usize, 0usize);
    for (p, v) in preds.iter().zip(gts) {
        if p.num_frames != v.num_frames() {
            return Err(PipelineError::Shape(format!("predictions for video {} cover {} frames", v.index, p.num_frames)));
        }
        let half = v.num_frames().div_ceil(2);
        for (k, tr) in v.tracklets.iter().enumerate() {
            let halves = [0..half, half..v.num_frames()];
            if !halves.iter().all(|h| h.clone().any(|t| tr.is_visible(t))) {
                continue;
            }
            eligible += 1;
            let [a, b] = halves.map(|h| {
                dominant(h.filter(|&t| tr.is_visible(t)).map(|t| identity_at(p, &v.mask(k, t), t)))
            });
            continuous += (a.is_some() && a == b) as usize;
        }
    }
    Ok(if eligible == 0 { 1.0 } else { continuous as f64 / eligible as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_iou_cases() {
        let a = vec![vec![true, true, false, false]; 2];
        assert_eq!(video_iou(&a, &a).unwrap(), 1.0);
        let b = vec![vec![false, false, true, true]; 2];
        assert_eq!(video_iou(&a, &b).unwrap(), 0.0);
        let half = vec![vec![true, false, false, false]; 2];
        assert_eq!(video_iou(&half, &a).unwrap(), 0.5);
        let empty = vec![vec![false; 4]; 2];
        assert_eq!(video_iou(&empty, &empty).unwrap(), 0.0);
        assert!(video_iou(&a, &a[..1]).is_err());
    }

    #[test]
    fn interpolation_of_simple_curves() {
        assert_eq!(interpolated_ap(&[true], 1), 1.0);
        assert_eq!(interpolated_ap(&[false], 1), 0.0);
        assert_eq!(interpolated_ap(&[true, false], 1), 1.0);
        // recall 0.5 at precision 1, then 1.0 at precision 2/3
        let ap = interpolated_ap(&[true, false, true], 2);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }
}
