//! Finite-difference gradient checks of every differentiable op and of the
//! full training loss, shared by the `grad-check` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::architecture::boxes::{apply_deltas, relative_to_corners};
use crate::architecture::{Model, ModelConfig};
use crate::numerics::{
    grad_check, grad_check_largest, multi_head_self_attention, AttentionWeights, Graph, Padding, Result, Tensor, Var,
};
use crate::synthvideo::{generate_video, SceneConfig};
use crate::training::{correspondence_loss, ClipRef, StepOptions};

pub const EPS: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-4;

/// Elements compared per parameter tensor in the loss check.
pub const LOSS_ELEMENTS_PER_TENSOR: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tol: f64,
    pub checked: usize,
    pub passed: bool,
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn random_box(r: &mut ChaCha8Rng, w: f64, h: f64) -> [f64; 4] {
    let (mx, my) = (w / 40.0, h / 40.0);
    let x1 = r.gen_range(mx..w * 0.5);
    let y1 = r.gen_range(my..h * 0.5);
    [x1, y1, r.gen_range(x1 + w / 10.0..w - mx), r.gen_range(y1 + h / 10.0..h - my)]
}

fn boxes(r: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Tensor {
    Tensor::new(vec![n, 4], (0..n).flat_map(|_| random_box(r, w, h)).collect()).expect("sized above")
}

fn attention(r: &mut ChaCha8Rng, c: usize, tokens: &[usize]) -> Vec<Tensor> {
    let mut v = Vec::new();
    for k in 0..4 {
        v.push(Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), r));
        // the key bias cancels in the softmax and gets no gradient
        if k != 1 {
            v.push(Tensor::randn(&[c], 0.1, r));
        }
    }
    v.push(randn(r, tokens));
    v
}

fn binary(n: usize, period: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|i| (i % period == 0) as u8 as f64).collect())
}

fn op_catalogue() -> Vec<(&'static str, Inputs, Build)> {
    let mut cases: Vec<(&'static str, Inputs, Build)> = Vec::new();
    let mut add = |name, inputs: Inputs, build: Build| cases.push((name, inputs, build));
    let two = |s: &'static [usize]| -> Inputs { Box::new(move |r| vec![randn(r, s), randn(r, s)]) };
    let one = |s: &'static [usize]| -> Inputs { Box::new(move |r| vec![randn(r, s)]) };

    add("add", two(&[3, 4]), Box::new(|g, v| g.add(v[0], v[1])));
    add("sub", two(&[3, 4]), Box::new(|g, v| g.sub(v[0], v[1])));
    add("mul", two(&[3, 4]), Box::new(|g, v| g.mul(v[0], v[1])));
    add("mul_scalar", one(&[2, 5]), Box::new(|g, v| Ok(g.mul_scalar(v[0], -1.7))));
    add("add_scalar", one(&[2, 5]), Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))));
    add("relu", one(&[2, 5]), Box::new(|g, v| Ok(g.relu(v[0]))));
    add("sigmoid", one(&[2, 5]), Box::new(|g, v| Ok(g.sigmoid(v[0]))));
    add("exp", one(&[2, 5]), Box::new(|g, v| Ok(g.exp(v[0]))));
    add("abs", one(&[2, 5]), Box::new(|g, v| Ok(g.abs(v[0]))));
    add("clamp", one(&[2, 5]), Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.5))));
    add("add_bias", Box::new(|r| vec![randn(r, &[2, 3, 4]), randn(r, &[4])]), Box::new(|g, v| g.add_bias(v[0], v[1])));
    add(
        "add_row_bias",
        Box::new(|r| vec![randn(r, &[2, 3, 3, 4]), randn(r, &[2, 4])]),
        Box::new(|g, v| g.add_row_bias(v[0], v[1])),
    );
    add(
        "scale_channels",
        Box::new(|r| vec![randn(r, &[2, 3]), randn(r, &[2, 3, 4])]),
        Box::new(|g, v| g.scale_channels(v[0], v[1])),
    );
    add("matmul", Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[4, 5])]), Box::new(|g, v| g.matmul(v[0], v[1])));
    add("bmm", Box::new(|r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])]), Box::new(|g, v| g.bmm(v[0], v[1], false)));
    add("bmm_t", Box::new(|r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])]), Box::new(|g, v| g.bmm(v[0], v[1], true)));
    add("reshape", one(&[2, 3, 4]), Box::new(|g, v| g.reshape(v[0], &[6, 4])));
    add("permute", one(&[2, 3, 4]), Box::new(|g, v| g.permute(v[0], &[2, 0, 1])));
    add("index_select", one(&[2, 3, 4]), Box::new(|g, v| g.index_select(v[0], &[1, 0, 1, 1])));
    add(
        "concat",
        Box::new(|r| vec![randn(r, &[2, 3]), randn(r, &[1, 3])]),
        Box::new(|g, v| g.concat(&[v[0], v[1], v[0]])),
    );
    add("sum_axis", one(&[2, 3, 4]), Box::new(|g, v| g.sum_axis(v[0], 1)));
    add("mean_axis", one(&[2, 3, 4]), Box::new(|g, v| g.mean_axis(v[0], 2)));
    add("softmax", one(&[3, 5]), Box::new(|g, v| g.softmax(v[0], 1)));
    add(
        "softmax_masked",
        one(&[3, 5]),
        Box::new(|g, v| {
            let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
            g.softmax_masked(v[0], 1, Some(&mask))
        }),
    );
    add("cross_entropy", one(&[3, 5]), Box::new(|g, v| g.cross_entropy(v[0], &[4, 0, 2])));
    add(
        "layer_norm",
        Box::new(|r| vec![randn(r, &[4, 6]), randn(r, &[6]), randn(r, &[6])]),
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
    add("cosine_similarity", two(&[3, 2, 4]), Box::new(|g, v| g.cosine_similarity(v[0], v[1])));
    add(
        "conv2d",
        Box::new(|r| vec![randn(r, &[3, 3, 2, 3]), randn(r, &[5, 4, 2])]),
        Box::new(|g, v| g.conv2d(v[0], v[1], 1, Padding::Zero)),
    );
    add(
        "conv2d_strided",
        Box::new(|r| vec![randn(r, &[3, 3, 2, 2]), randn(r, &[2, 5, 6, 2])]),
        Box::new(|g, v| g.conv2d(v[0], v[1], 2, Padding::Replicate)),
    );
    add(
        "conv2d_wide",
        Box::new(|r| vec![randn(r, &[3, 3, 2, 9]), randn(r, &[2, 4, 3, 2])]),
        Box::new(|g, v| g.conv2d(v[0], v[1], 1, Padding::Zero)),
    );
    add(
        "conv2d_per_sample",
        Box::new(|r| vec![randn(r, &[2, 1, 1, 3, 8]), randn(r, &[2, 3, 3, 3])]),
        Box::new(|g, v| g.conv2d(v[0], v[1], 1, Padding::Zero)),
    );
    add("upsample2x", one(&[2, 2, 3, 2]), Box::new(|g, v| g.upsample2x(v[0])));
    add(
        "roi_align",
        Box::new(|r| {
            let b = boxes(r, 3, 24.0, 20.0);
            vec![randn(r, &[2, 5, 6, 3]), b]
        }),
        Box::new(|g, v| g.roi_align(v[0], v[1], &[0, 1, 1], 3, 4, 0.25, (24.0, 20.0))),
    );
    add(
        "paste_masks",
        Box::new(|r| {
            let b = boxes(r, 2, 12.0, 10.0);
            vec![randn(r, &[2, 4, 4]), b]
        }),
        Box::new(|g, v| g.paste_masks(v[0], v[1], 10, 12)),
    );
    add(
        "binary_cross_entropy",
        Box::new(|r| vec![Tensor::uniform(&[3, 4], 0.05, 0.95, r)]),
        Box::new(|g, v| g.binary_cross_entropy(v[0], &binary(12, 3).reshape(&[3, 4])?)),
    );
    add(
        "dice_loss",
        Box::new(|r| vec![Tensor::uniform(&[2, 6], 0.0, 1.0, r)]),
        Box::new(|g, v| g.dice_loss(v[0], &binary(12, 2).reshape(&[2, 6])?)),
    );
    add(
        "giou_loss",
        Box::new(|r| vec![boxes(r, 3, 1.0, 1.0)]),
        Box::new(|g, v| g.giou_loss(v[0], &[[0.15, 0.2, 0.6, 0.45], [0.05, 0.07, 0.2, 0.9], [0.75, 0.75, 0.95, 0.97]])),
    );
    add(
        "multi_head_self_attention",
        Box::new(|r| attention(r, 8, &[2, 4, 8])),
        Box::new(|g, v| {
            let w = AttentionWeights { wq: v[0], bq: v[1], wk: v[2], bk: None, wv: v[3], bv: v[4], wo: v[5], bo: v[6] };
            multi_head_self_attention(g, v[7], &w, 2)
        }),
    );
    add(
        "relative_to_corners",
        Box::new(|r| vec![Tensor::uniform(&[3, 4], 0.2, 0.6, r)]),
        Box::new(|g, v| relative_to_corners(g, v[0], 20.0, 16.0)),
    );
    add(
        "apply_deltas",
        Box::new(|r| {
            let b = boxes(r, 3, 20.0, 16.0);
            vec![b, Tensor::randn(&[3, 4], 0.3, r)]
        }),
        Box::new(|g, v| apply_deltas(g, v[0], v[1], 20.0, 16.0)),
    );
    cases
}

/// `Σ r ⊙ y` with fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Every differentiable op at one seed, all elements, tolerance [`OP_TOL`].
pub fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    op_catalogue()
        .into_iter()
        .map(|(name, inputs, build)| {
            let xs = inputs(&mut ChaCha8Rng::seed_from_u64(seed));
            let report = grad_check(
                |g, v| {
                    let y = build(g, v)?;
                    weighted_sum(g, y, seed)
                },
                &xs,
                EPS,
                OP_TOL,
            )?;
            Ok(GradCase {
                name: name.to_string(),
                seed,
                max_rel_error: report.max_rel_error.iter().copied().fold(0.0, f64::max),
                tol: OP_TOL,
                checked: report.checked.iter().sum(),
                passed: report.passed,
            })
        })
        .collect()
}

/// Small model used by the loss check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { channels: 8, queries: 3, iterations: 2, heads: 2, roi_size: 2, mask_size: 4, num_classes: 3, ..ModelConfig::default() }
}

/// The two-clip training loss of a small model wrt every parameter tensor,
/// comparing the [`LOSS_ELEMENTS_PER_TENSOR`] largest-gradient elements of
/// each, tolerance [`LOSS_TOL`].
pub fn loss_case(seed: u64) -> Result<GradCase> {
    Ok(loss_report(seed)?.0)
}

/// [`loss_case`] with the per-tensor report, in parameter store order.
pub fn loss_report(seed: u64) -> Result<(GradCase, crate::numerics::GradCheckReport, Vec<String>)> {
    let scene = SceneConfig {
        num_videos: 1,
        frames_per_video: 4,
        frame_h: 24,
        frame_w: 24,
        min_objects: 1,
        max_objects: 2,
        radius_range: [3.0, 5.0],
        seed,
        ..SceneConfig::default()
    };
    let video = generate_video(&scene, 0).map_err(|e| crate::numerics::NumericsError::Config(e.to_string()))?;
    let model = Model::new(tiny_model_config(), seed)?;
    let opts = StepOptions::default();
    let (a, b) = ([0usize, 1], [2usize, 3]);
    let report = grad_check_largest(
        |g, vars| {
            let p = model.params.bind_vars(vars.to_vec());
            let step = correspondence_loss(
                g,
                &p,
                &model,
                ClipRef { video: &video, frames: &a },
                ClipRef { video: &video, frames: &b },
                &opts,
            )
            .map_err(|e| crate::numerics::NumericsError::Config(e.to_string()))?;
            Ok(step.loss)
        },
        model.params.tensors(),
        EPS,
        LOSS_TOL,
        LOSS_ELEMENTS_PER_TENSOR,
    )?;
    let case = GradCase {
        name: "correspondence_loss".into(),
        seed,
        max_rel_error: report.max_rel_error.iter().copied().fold(0.0, f64::max),
        tol: LOSS_TOL,
        checked: report.checked.iter().sum(),
        passed: report.passed,
    };
    Ok((case, report, model.params.names().to_vec()))
}

/// [`op_cases`] and [`loss_case`] for every seed.
pub fn gradient_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for seed in seeds {
        out.extend(op_cases(seed)?);
        out.push(loss_case(seed)?);
    }
    Ok(out)
}
