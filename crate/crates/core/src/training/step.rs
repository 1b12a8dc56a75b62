use super::{hungarian, clip_loss, Assignment, ClipTargets, IterationValues, LossBreakdown, LossWeights, Result, TrainError};
use crate::architecture::{forward_clip, init_tracklet_state, repeat_over_time, Bound, ClipOutputs, Model};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthvideo::Video;

/// Frames of one video forming a clip.
#[derive(Clone, Copy, Debug)]
pub struct ClipRef<'a> {
    pub video: &'a Video,
    pub frames: &'a [usize],
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions {
    pub weights: LossWeights,
    /// Re-match at every iteration instead of reusing the last iteration's matching.
    pub match_per_iteration: bool,
}

/// Loss and parameter gradients of one training step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Summed over iterations, one entry per clip.
    pub breakdown: Vec<LossBreakdown>,
    /// Matching of the (first) clip's last iteration.
    pub assignment: Assignment,
    /// Ground-truth tracklet indices, in assignment column order.
    pub tracklets: Vec<usize>,
    /// Queries `[N,T,C]` fed to the second clip, if any.
    pub handed_off: Option<Tensor>,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
}

fn last_assignment(g: &Graph, out: &ClipOutputs, targets: &ClipTargets, w: &LossWeights) -> Result<Assignment> {
    let last = out.iterations.last().expect("at least one iteration");
    let vals = IterationValues::read(g, last, out.queries_in, out.frames);
    hungarian(&vals.cost_matrix(targets, w))
}

/// Sum over iterations of the clip loss. Uses `fixed` at every iteration, or
/// re-matches each iteration when `fixed` is `None`.
fn loss_over_iterations(
    g: &mut Graph,
    out: &ClipOutputs,
    targets: &ClipTargets,
    fixed: Option<&Assignment>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut sum = LossBreakdown::default();
    for it in &out.iterations {
        let (loss, b) = match fixed {
            Some(a) => clip_loss(g, it, targets, a, out.queries_in, w)?,
            None => {
                let vals = IterationValues::read(g, it, out.queries_in, out.frames);
                let a = hungarian(&vals.cost_matrix(targets, w))?;
                clip_loss(g, it, targets, &a, out.queries_in, w)?
            }
        };
        sum += b;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    Ok((total.expect("at least one iteration"), sum))
}

fn run_clip(g: &mut Graph, p: &Bound, model: &Model, clip: ClipRef<'_>, queries: Option<Var>) -> Result<ClipOutputs> {
    let v = clip.video;
    let frames = g.constant(v.frames_tensor_at(clip.frames));
    let (init_q, init_b) = init_tracklet_state(g, p, clip.frames.len(), v.frame_w as f64, v.frame_h as f64)?;
    Ok(forward_clip(g, p, &model.config, frames, queries.unwrap_or(init_q), init_b)?)
}

fn collect_grads(g: &Graph, p: &Bound, loss: Var) -> Result<Vec<Vec<f64>>> {
    let mut grads = g.backward(loss)?;
    Ok(p.vars().iter().map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()])).collect())
}

/// Loss graph of one step, before differentiation.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub loss: Var,
    pub breakdown: Vec<LossBreakdown>,
    pub assignment: Assignment,
    pub tracklets: Vec<usize>,
    pub handed_off: Option<Var>,
}

/// Builds the loss of one clip from the learned initial state, matched on
/// its own ground truths.
pub fn clip_step_loss(g: &mut Graph, p: &Bound, model: &Model, clip: ClipRef<'_>, opts: &StepOptions) -> Result<StepLoss> {
    let out = run_clip(g, p, model, clip, None)?;
    let tracklets = ClipTargets::visible_tracklets(clip.video, clip.frames);
    let targets = ClipTargets::from_video(clip.video, clip.frames, &tracklets);
    let assignment = last_assignment(g, &out, &targets, &opts.weights)?;
    let fixed = (!opts.match_per_iteration).then_some(&assignment);
    let (loss, breakdown) = loss_over_iterations(g, &out, &targets, fixed, &opts.weights)?;
    Ok(StepLoss { loss, breakdown: vec![breakdown], assignment, tracklets, handed_off: None })
}

/// Builds the loss of two clips of one video processed in sequence. The first
/// starts from the learned initial state; the second starts from the detached
/// time-mean of the first clip's output queries, repeated over its frames,
/// and the learned initial boxes. The matching found on the first clip is
/// imposed on every iteration of the second, so a slot is penalised for
/// switching to another instance.
pub fn correspondence_loss(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    first: ClipRef<'_>,
    second: ClipRef<'_>,
    opts: &StepOptions,
) -> Result<StepLoss> {
    if first.video.index != second.video.index
        || first.video.tracklets.len() != second.video.tracklets.len()
        || first.video.frame_h != second.video.frame_h
        || first.video.frame_w != second.video.frame_w
    {
        return Err(TrainError::VideoMismatch(first.video.index, second.video.index));
    }
    let video = first.video;
    let both: Vec<usize> = first.frames.iter().chain(second.frames).copied().collect();
    let tracklets = ClipTargets::visible_tracklets(video, &both);
    let targets_a = ClipTargets::from_video(video, first.frames, &tracklets);
    let targets_b = ClipTargets::from_video(video, second.frames, &tracklets);

    let out_a = run_clip(g, p, model, first, None)?;
    let assignment = last_assignment(g, &out_a, &targets_a, &opts.weights)?;
    let fixed = (!opts.match_per_iteration).then_some(&assignment);
    let (loss_a, b_a) = loss_over_iterations(g, &out_a, &targets_a, fixed, &opts.weights)?;

    let mean = g.mean_axis(out_a.queries, 1)?;
    let mean = g.detach(mean);
    let handed = repeat_over_time(g, mean, second.frames.len())?;
    let out_b = run_clip(g, p, model, second, Some(handed))?;
    let (loss_b, b_b) = loss_over_iterations(g, &out_b, &targets_b, Some(&assignment), &opts.weights)?;

    let loss = g.add(loss_a, loss_b)?;
    Ok(StepLoss { loss, breakdown: vec![b_a, b_b], assignment, tracklets, handed_off: Some(handed) })
}

fn finish(g: &Graph, p: &Bound, step: StepLoss) -> Result<StepOutput> {
    let grads = collect_grads(g, p, step.loss)?;
    Ok(StepOutput {
        loss: g.value(step.loss).item(),
        breakdown: step.breakdown,
        assignment: step.assignment,
        tracklets: step.tracklets,
        handed_off: step.handed_off.map(|v| g.value(v).clone()),
        grads,
    })
}

/// [`clip_step_loss`] and its parameter gradients.
pub fn clip_step(model: &Model, clip: ClipRef<'_>, opts: &StepOptions) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let step = clip_step_loss(&mut g, &p, model, clip, opts)?;
    finish(&g, &p, step)
}

/// [`correspondence_loss`] and its parameter gradients.
pub fn correspondence_step(model: &Model, first: ClipRef<'_>, second: ClipRef<'_>, opts: &StepOptions) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let step = correspondence_loss(&mut g, &p, model, first, second, opts)?;
    finish(&g, &p, step)
}
