use super::boxes::{apply_deltas, relative_to_corners};
use super::params::{Bound, BACKBONE_STRIDES};
use super::{AttentionScheme, DynamicConvMode, ModelConfig, QueryMode};
use crate::numerics::{multi_head_attention, AttentionWeights, Graph, NumericsError, Padding, Result, Tensor, Var};

/// Backbone output stride.
pub const FEATURE_STRIDE: usize = 4;

const NORM_EPS: f64 = 1e-5;

/// Frames `[T,H,W,3]` to base features `[T,H/4,W/4,C]`, one frame at a time
/// with shared weights.
pub fn backbone(g: &mut Graph, p: &Bound, frames: Var) -> Result<Var> {
    let &[_, h, w, 3] = g.shape(frames) else {
        return Err(NumericsError::Shape(format!("frames must be [T,H,W,3], got {:?}", g.shape(frames))));
    };
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(NumericsError::Config(format!("frame {h}x{w} is not divisible by {FEATURE_STRIDE}")));
    }
    let mut x = frames;
    for (l, &stride) in BACKBONE_STRIDES.iter().enumerate() {
        if l > 0 {
            x = g.relu(x);
        }
        let conv = g.conv2d(p.var(&format!("backbone.{l}.w")), x, stride, Padding::Replicate)?;
        x = g.add_bias(conv, p.var(&format!("backbone.{l}.b")))?;
    }
    Ok(x)
}

/// Sinusoidal encoding of frame positions `0..t` in `c` channels.
pub fn time_encoding(t: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; t * c];
    for pos in 0..t {
        for i in 0..c {
            let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / c as f64);
            let a = pos as f64 * freq;
            data[pos * c + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![t, c], data).expect("sized above")
}

/// `[N,C]` to `[N,T,C]` with every row repeated `t` times.
pub fn repeat_over_time(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    let &[n, c] = g.shape(x) else {
        return Err(NumericsError::Shape(format!("repeat_over_time of {:?}", g.shape(x))));
    };
    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, t)).collect();
    let r = g.index_select(x, &idx)?;
    g.reshape(r, &[n, t, c])
}

/// Initial queries `[N,T,C]` and proposals `[N*T,4]` (row `i*T + t`): the
/// learned per-slot query and box, repeated over the clip.
pub fn init_tracklet_state(g: &mut Graph, p: &Bound, t: usize, frame_w: f64, frame_h: f64) -> Result<(Var, Var)> {
    let q = repeat_over_time(g, p.var("init.query"), t)?;
    let b = relative_to_corners(g, p.var("init.box"), frame_w, frame_h)?;
    let n = g.shape(b)[0];
    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, t)).collect();
    let b = g.index_select(b, &idx)?;
    Ok((q, b))
}

fn attention_weights(p: &Bound, prefix: &str) -> AttentionWeights {
    let v = |s: &str| p.var(&format!("{prefix}.{s}"));
    AttentionWeights {
        wq: v("q.w"),
        bq: v("q.b"),
        wk: v("k.w"),
        bk: None,
        wv: v("v.w"),
        bv: v("v.b"),
        wo: v("o.w"),
        bo: v("o.b"),
    }
}

/// `norm(x + attention(x + pos))` over sequences `[B,L,C]`.
fn attention_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, pos: Option<Var>, heads: usize) -> Result<Var> {
    let inp = match pos {
        Some(pe) => g.add(x, pe)?,
        None => x,
    };
    let a = multi_head_attention(g, inp, inp, inp, &attention_weights(p, prefix), heads)?;
    let r = g.add(x, a)?;
    g.layer_norm(r, p.var(&format!("{prefix}_norm.g")), p.var(&format!("{prefix}_norm.b")), NORM_EPS)
}

/// Self-attention over queries `[N,T,C]` for iteration `m`: within each query
/// across its frames, then within each frame across queries.
pub fn factorised_attention(g: &mut Graph, p: &Bound, cfg: &ModelConfig, m: usize, q: Var) -> Result<Var> {
    let &[n, t, c] = g.shape(q) else {
        return Err(NumericsError::Shape(format!("queries must be [N,T,C], got {:?}", g.shape(q))));
    };
    let mut q = q;
    if cfg.attention != AttentionScheme::Spatial {
        let pe = time_encoding(t, c);
        let pe = Tensor::new(vec![n, t, c], pe.data().repeat(n))?;
        let pe = g.constant(pe);
        q = attention_block(g, p, &format!("it{m}.temporal"), q, Some(pe), cfg.heads)?;
    }
    if cfg.attention != AttentionScheme::Temporal {
        let s = g.permute(q, &[1, 0, 2])?;
        let s = attention_block(g, p, &format!("it{m}.spatial"), s, None, cfg.heads)?;
        q = g.permute(s, &[1, 0, 2])?;
    }
    Ok(q)
}

/// Blends neighbour responses `[R*3, h, w, C]` (slots `t-1, t, t+1` of each of
/// `R` frames, centre in slot 1) with per-pixel weights: the softmax over the
/// available slots of the cosine similarity to the centre response. Returns
/// the blend `[R,h,w,C]` and the weights `[R,3,h*w]`.
pub fn adaptive_blend(g: &mut Graph, responses: Var, available: &[bool]) -> Result<(Var, Var)> {
    let &[r3, h, w, c] = g.shape(responses) else {
        return Err(NumericsError::Shape(format!("responses {:?}", g.shape(responses))));
    };
    if r3 % 3 != 0 || available.len() != r3 || (0..r3 / 3).any(|j| !available[j * 3 + 1]) {
        return Err(NumericsError::Shape("responses must come in triples with the centre available".into()));
    }
    let (rows, px) = (r3 / 3, h * w);
    let centre_idx: Vec<usize> = (0..r3).map(|k| k / 3 * 3 + 1).collect();
    let centre = g.index_select(responses, &centre_idx)?;
    let cos = g.cosine_similarity(responses, centre)?;
    let cos = g.reshape(cos, &[rows, 3, px])?;
    let mask: Vec<bool> = available.iter().flat_map(|&a| std::iter::repeat_n(a, px)).collect();
    let weights = g.softmax_masked(cos, 1, Some(&mask))?;
    let wf = g.reshape(weights, &[r3, px])?;
    let rf = g.reshape(responses, &[r3, px, c])?;
    let scaled = g.scale_channels(wf, rf)?;
    let scaled = g.reshape(scaled, &[rows, 3, px * c])?;
    let blend = g.sum_axis(scaled, 1)?;
    Ok((g.reshape(blend, &[rows, h, w, c])?, weights))
}

/// Temporal dynamic convolution for iteration `m`. `q` is `[N*T,C]`,
/// `proposals` `[N*T,4]`, both in row order `i*T + t`; `features` is
/// `[T,h,w,C]`. The 1×1 filter generated from `q[i,t]` is applied to the RoI
/// features of frames `t-1, t, t+1` under the boxes of those frames.
/// Returns `[N*T,r,r,C]` and, in temporal mode, the adaptive weights.
#[allow(clippy::too_many_arguments)]
pub fn temporal_dynamic_conv(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    m: usize,
    q: Var,
    proposals: Var,
    features: Var,
    frame: (f64, f64),
) -> Result<(Var, Option<Var>)> {
    let &[rows, c] = g.shape(q) else {
        return Err(NumericsError::Shape(format!("tdc queries {:?}", g.shape(q))));
    };
    let t = g.shape(features)[0];
    if rows % t != 0 {
        return Err(NumericsError::Shape(format!("{rows} query rows for {t} frames")));
    }
    let r = cfg.roi_size;
    let frame_of: Vec<usize> = (0..rows).map(|j| j % t).collect();
    let rois = g.roi_align(features, proposals, &frame_of, r, r, 1.0 / FEATURE_STRIDE as f64, frame)?;

    let wflat = g.matmul(q, p.var(&format!("it{m}.filter.w")))?;
    let wflat = g.add_bias(wflat, p.var(&format!("it{m}.filter.b")))?;
    let filters = g.reshape(wflat, &[rows, 1, 1, c, c])?;
    let bias = g.matmul(q, p.var(&format!("it{m}.filter_bias.w")))?;
    let bias = g.add_bias(bias, p.var(&format!("it{m}.filter_bias.b")))?;

    match cfg.dynamic_conv {
        DynamicConvMode::Still => {
            let resp = g.conv2d(filters, rois, 1, Padding::Zero)?;
            let resp = g.add_row_bias(resp, bias)?;
            Ok((g.relu(resp), None))
        }
        DynamicConvMode::Temporal => {
            let mut src = Vec::with_capacity(rows * 3);
            let mut available = Vec::with_capacity(rows * 3);
            for j in 0..rows {
                let tt = j % t;
                for s in 0..3 {
                    let nb = tt as isize + s as isize - 1;
                    let ok = nb >= 0 && (nb as usize) < t;
                    available.push(ok);
                    src.push(if ok { j - tt + nb as usize } else { j });
                }
            }
            let own: Vec<usize> = (0..rows * 3).map(|k| k / 3).collect();
            let x = g.index_select(rois, &src)?;
            let f = g.index_select(filters, &own)?;
            let b = g.index_select(bias, &own)?;
            let resp = g.conv2d(f, x, 1, Padding::Zero)?;
            let resp = g.add_row_bias(resp, b)?;
            let (blend, weights) = adaptive_blend(g, resp, &available)?;
            Ok((g.relu(blend), Some(weights)))
        }
    }
}

/// Per-row head outputs for `R` (instance, frame) rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[R, K+1]`, background last.
    pub class_logits: Var,
    /// `[R,4]` corners in frame pixels.
    pub boxes: Var,
    /// `[R, Hm, Wm]` in proposal-box coordinates.
    pub mask_logits: Var,
    /// `[R, H, W]` mask probabilities pasted into the frame.
    pub masks: Var,
    /// `[R, C]` updated query embeddings.
    pub queries: Var,
}

/// Class, box, mask and query-update heads on tracklet features `o [R,r,r,C]`.
pub fn heads(
    g: &mut Graph,
    p: &Bound,
    m: usize,
    o: Var,
    q: Var,
    proposals: Var,
    frame: (usize, usize),
) -> Result<HeadOutputs> {
    let &[rows, r, _, c] = g.shape(o) else {
        return Err(NumericsError::Shape(format!("tracklet features {:?}", g.shape(o))));
    };
    let v = |s: &str| p.var(&format!("it{m}.{s}"));
    let flat = g.reshape(o, &[rows, r * r * c])?;
    let pooled = g.matmul(flat, v("pool.w"))?;
    let pooled = g.add_bias(pooled, v("pool.b"))?;
    let pooled = g.relu(pooled);

    let logits = g.matmul(pooled, v("cls.w"))?;
    let class_logits = g.add_bias(logits, v("cls.b"))?;
    let deltas = g.matmul(pooled, v("box.w"))?;
    let deltas = g.add_bias(deltas, v("box.b"))?;
    let (fh, fw) = frame;
    let boxes = apply_deltas(g, proposals, deltas, fw as f64, fh as f64)?;

    let upd = g.matmul(pooled, v("update.w"))?;
    let upd = g.add_bias(upd, v("update.b"))?;
    let upd = g.add(q, upd)?;
    let queries = g.layer_norm(upd, v("update_norm.g"), v("update_norm.b"), NORM_EPS)?;

    let x = g.conv2d(v("mask.0.w"), o, 1, Padding::Zero)?;
    let x = g.add_bias(x, v("mask.0.b"))?;
    let x = g.relu(x);
    let x = g.upsample2x(x)?;
    let x = g.conv2d(v("mask.1.w"), x, 1, Padding::Zero)?;
    let x = g.add_bias(x, v("mask.1.b"))?;
    let mask_logits = g.reshape(x, &[rows, 2 * r, 2 * r])?;
    let probs = g.sigmoid(mask_logits);
    let masks = g.paste_masks(probs, proposals, fh, fw)?;
    Ok(HeadOutputs { class_logits, boxes, mask_logits, masks, queries })
}

/// Graph handles of one refinement iteration; rows are `i*T + t`.
#[derive(Clone, Copy, Debug)]
pub struct IterationOutputs {
    pub class_logits: Var,
    pub boxes: Var,
    pub mask_logits: Var,
    pub masks: Var,
    /// Adaptive weights `[N*T,3,r*r]` in temporal mode.
    pub adaptive_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ClipOutputs {
    pub queries_in: usize,
    pub frames: usize,
    pub iterations: Vec<IterationOutputs>,
    /// Final queries `[N,T,C]`.
    pub queries: Var,
    pub features: Var,
}

/// Plain-tensor predictions of a clip's last iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPredictions {
    /// `[N,T,K+1]` probabilities, background last.
    pub class_probs: Tensor,
    /// `[N,T,4]`.
    pub boxes: Tensor,
    /// `[N,T,H,W]` probabilities.
    pub masks: Tensor,
    /// `[N,T,C]`.
    pub queries: Tensor,
}

impl ClipOutputs {
    pub fn predictions(&self, g: &mut Graph) -> Result<ClipPredictions> {
        let last = *self.iterations.last().expect("at least one iteration");
        let (n, t) = (self.queries_in, self.frames);
        let probs = g.softmax(last.class_logits, 1)?;
        let k1 = g.shape(probs)[1];
        let masks = g.value(last.masks);
        let (h, w) = (masks.shape()[1], masks.shape()[2]);
        Ok(ClipPredictions {
            class_probs: g.value(probs).clone().reshape(&[n, t, k1])?,
            boxes: g.value(last.boxes).clone().reshape(&[n, t, 4])?,
            masks: masks.clone().reshape(&[n, t, h, w])?,
            queries: g.value(self.queries).clone(),
        })
    }
}

fn share_over_time(g: &mut Graph, q: Var) -> Result<Var> {
    let t = g.shape(q)[1];
    let mean = g.mean_axis(q, 1)?;
    repeat_over_time(g, mean, t)
}

/// Runs `M` refinement iterations on one clip. `frames` is `[T,H,W,3]`,
/// `queries` `[N,T,C]` and `proposals` `[N*T,4]`. Boxes passed from one
/// iteration to the next are detached.
pub fn forward_clip(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    frames: Var,
    queries: Var,
    proposals: Var,
) -> Result<ClipOutputs> {
    cfg.validate()?;
    let &[t, h, w, _] = g.shape(frames) else {
        return Err(NumericsError::Shape(format!("frames {:?}", g.shape(frames))));
    };
    let &[n, tq, c] = g.shape(queries) else {
        return Err(NumericsError::Shape(format!("queries {:?}", g.shape(queries))));
    };
    if tq != t || c != cfg.channels || g.shape(proposals) != [n * t, 4] {
        return Err(NumericsError::Shape(format!(
            "clip of {t} frames with queries {:?} and proposals {:?}",
            g.shape(queries),
            g.shape(proposals)
        )));
    }
    let features = backbone(g, p, frames)?;
    let mut q = queries;
    let mut props = proposals;
    let mut iterations = Vec::with_capacity(cfg.iterations);
    for m in 0..cfg.iterations {
        q = factorised_attention(g, p, cfg, m, q)?;
        if cfg.query_mode == QueryMode::Shared {
            q = share_over_time(g, q)?;
        }
        let qf = g.reshape(q, &[n * t, c])?;
        let (o, adaptive_weights) = temporal_dynamic_conv(g, p, cfg, m, qf, props, features, (w as f64, h as f64))?;
        let out = heads(g, p, m, o, qf, props, (h, w))?;
        q = g.reshape(out.queries, &[n, t, c])?;
        if cfg.query_mode == QueryMode::Shared {
            q = share_over_time(g, q)?;
        }
        iterations.push(IterationOutputs {
            class_logits: out.class_logits,
            boxes: out.boxes,
            mask_logits: out.mask_logits,
            masks: out.masks,
            adaptive_weights,
        });
        props = g.detach(out.boxes);
    }
    Ok(ClipOutputs { queries_in: n, frames: t, iterations, queries: q, features })
}
