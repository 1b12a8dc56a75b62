use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackletvis::numerics::{
    grad_check, multi_head_self_attention, AttentionWeights, Graph, Padding, Result, Tensor, Var,
};

const EPS: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Σ r ⊙ y with fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng(seed ^ 0xabcdef));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..10u64 {
        let xs = inputs(&mut rng(seed));
        let report = grad_check(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, seed)
            },
            &xs,
            EPS,
            UNIT_TOL,
        )
        .unwrap();
        assert!(report.passed, "{name} seed {seed}: {report:?}");
    }
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

#[test]
fn elementwise_ops() {
    let two = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
    check("add", two, |g, v| g.add(v[0], v[1]));
    check("sub", two, |g, v| g.sub(v[0], v[1]));
    check("mul", two, |g, v| g.mul(v[0], v[1]));
    let one = |r: &mut ChaCha8Rng| vec![randn(r, &[2, 5])];
    check("mul_scalar", one, |g, v| Ok(g.mul_scalar(v[0], -1.7)));
    check("add_scalar", one, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("relu", one, |g, v| Ok(g.relu(v[0])));
    check("sigmoid", one, |g, v| Ok(g.sigmoid(v[0])));
    check("exp", one, |g, v| Ok(g.exp(v[0])));
    check("abs", one, |g, v| Ok(g.abs(v[0])));
    check("clamp", one, |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
    check("add_bias", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4])], |g, v| g.add_bias(v[0], v[1]));
    check("add_row_bias", |r| vec![randn(r, &[2, 3, 3, 4]), randn(r, &[2, 4])], |g, v| g.add_row_bias(v[0], v[1]));
    check("scale_channels", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 3, 4])], |g, v| {
        g.scale_channels(v[0], v[1])
    });
}

#[test]
fn linear_algebra_ops() {
    check("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 5])], |g, v| g.matmul(v[0], v[1]));
    check("bmm", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])], |g, v| g.bmm(v[0], v[1], false));
    check("bmm_t", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn shape_ops() {
    let x = |r: &mut ChaCha8Rng| vec![randn(r, &[2, 3, 4])];
    check("reshape", x, |g, v| g.reshape(v[0], &[6, 4]));
    check("permute", x, |g, v| g.permute(v[0], &[2, 0, 1]));
    check("index_select", x, |g, v| g.index_select(v[0], &[1, 0, 1, 1]));
    check("concat", |r| vec![randn(r, &[2, 3]), randn(r, &[1, 3])], |g, v| g.concat(&[v[0], v[1], v[0]]));
    check("sum_axis", x, |g, v| g.sum_axis(v[0], 1));
    check("mean_axis", x, |g, v| g.mean_axis(v[0], 2));
    check("sum", x, |g, v| Ok(g.sum(v[0])));
}

#[test]
fn normalization_ops() {
    let x = |r: &mut ChaCha8Rng| vec![randn(r, &[3, 5])];
    check("softmax_last", x, |g, v| g.softmax(v[0], 1));
    check("softmax_first", x, |g, v| g.softmax(v[0], 0));
    check("softmax_masked", x, |g, v| {
        let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
        g.softmax_masked(v[0], 1, Some(&mask))
    });
    check("cross_entropy", x, |g, v| g.cross_entropy(v[0], &[4, 0, 2]));
    check(
        "layer_norm",
        |r| vec![randn(r, &[4, 6]), randn(r, &[6]), randn(r, &[6])],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check("cosine", |r| vec![randn(r, &[3, 2, 4]), randn(r, &[3, 2, 4])], |g, v| {
        g.cosine_similarity(v[0], v[1])
    });
}

#[test]
fn convolution_ops() {
    check("conv2d_3x3", |r| vec![randn(r, &[3, 3, 2, 3]), randn(r, &[5, 4, 2])], |g, v| {
        g.conv2d(v[0], v[1], 1, Padding::Zero)
    });
    check("conv2d_stride2_replicate", |r| vec![randn(r, &[3, 3, 2, 2]), randn(r, &[2, 5, 6, 2])], |g, v| {
        g.conv2d(v[0], v[1], 2, Padding::Replicate)
    });
    check("conv2d_per_sample", |r| vec![randn(r, &[2, 1, 1, 3, 2]), randn(r, &[2, 3, 3, 3])], |g, v| {
        g.conv2d(v[0], v[1], 1, Padding::Zero)
    });
    // eight or more output channels take the wide kernel path
    check("conv2d_wide", |r| vec![randn(r, &[3, 3, 2, 9]), randn(r, &[2, 4, 3, 2])], |g, v| {
        g.conv2d(v[0], v[1], 1, Padding::Zero)
    });
    check("conv2d_wide_per_sample", |r| vec![randn(r, &[2, 1, 1, 3, 8]), randn(r, &[2, 3, 3, 3])], |g, v| {
        g.conv2d(v[0], v[1], 1, Padding::Zero)
    });
    check("upsample2x", |r| vec![randn(r, &[2, 2, 3, 2])], |g, v| g.upsample2x(v[0]));
}

fn random_box(r: &mut ChaCha8Rng, w: f64, h: f64) -> [f64; 4] {
    let (mx, my) = (w / 40.0, h / 40.0);
    let x1 = r.gen_range(mx..w * 0.5);
    let y1 = r.gen_range(my..h * 0.5);
    [x1, y1, r.gen_range(x1 + w / 10.0..w - mx), r.gen_range(y1 + h / 10.0..h - my)]
}

#[test]
fn roi_align_gradients() {
    check(
        "roi_align",
        |r| {
            let boxes: Vec<f64> = (0..3).flat_map(|_| random_box(r, 24.0, 20.0)).collect();
            vec![randn(r, &[2, 5, 6, 3]), Tensor::new(vec![3, 4], boxes).unwrap()]
        },
        |g, v| g.roi_align(v[0], v[1], &[0, 1, 1], 3, 4, 0.25, (24.0, 20.0)),
    );
}

#[test]
fn paste_gradients() {
    check(
        "paste_masks",
        |r| {
            let boxes: Vec<f64> = (0..2).flat_map(|_| random_box(r, 12.0, 10.0)).collect();
            vec![randn(r, &[2, 4, 4]), Tensor::new(vec![2, 4], boxes).unwrap()]
        },
        |g, v| g.paste_masks(v[0], v[1], 10, 12),
    );
}

#[test]
fn loss_kernels() {
    check(
        "bce",
        |r| vec![Tensor::uniform(&[3, 4], 0.05, 0.95, r)],
        |g, v| {
            let t = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect())?;
            g.binary_cross_entropy(v[0], &t)
        },
    );
    check(
        "dice",
        |r| vec![Tensor::uniform(&[2, 6], 0.0, 1.0, r)],
        |g, v| {
            let t = Tensor::new(vec![2, 6], (0..12).map(|i| (i % 2) as f64).collect())?;
            g.dice_loss(v[0], &t)
        },
    );
    check(
        "giou",
        |r| {
            // unit-scale coordinates, like the other ops' inputs
            let boxes: Vec<f64> = (0..3).flat_map(|_| random_box(r, 1.0, 1.0)).collect();
            vec![Tensor::new(vec![3, 4], boxes).unwrap()]
        },
        |g, v| g.giou_loss(v[0], &[[0.15, 0.2, 0.6, 0.45], [0.05, 0.07, 0.2, 0.9], [0.75, 0.75, 0.95, 0.97]]),
    );
}

fn attention_weights(v: &[Var]) -> AttentionWeights {
    AttentionWeights { wq: v[0], bq: v[1], wk: v[2], bk: Some(v[3]), wv: v[4], bv: v[5], wo: v[6], bo: v[7] }
}

fn attention_inputs(r: &mut ChaCha8Rng, c: usize) -> Vec<Tensor> {
    let mut v = Vec::new();
    for _ in 0..4 {
        v.push(Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), r));
        v.push(Tensor::randn(&[c], 0.1, r));
    }
    v
}

#[test]
fn attention_gradients() {
    // the key bias shifts every score of a query row equally, so softmax
    // ignores it: check it separately as an exact zero and drop it here
    check(
        "msa",
        |r| {
            let mut v = attention_inputs(r, 8);
            v.remove(3);
            v.push(randn(r, &[2, 4, 8]));
            v
        },
        |g, v| {
            let w = AttentionWeights {
                wq: v[0], bq: v[1], wk: v[2], bk: None, wv: v[3], bv: v[4], wo: v[5], bo: v[6],
            };
            multi_head_self_attention(g, v[7], &w, 2)
        },
    );
    let mut r = rng(77);
    let mut g = Graph::new();
    let params: Vec<Var> = attention_inputs(&mut r, 8).into_iter().map(|t| g.param(t)).collect();
    let w = attention_weights(&params);
    let x = g.constant(randn(&mut r, &[2, 3, 8]));
    let y = multi_head_self_attention(&mut g, x, &w, 2).unwrap();
    let f = weighted_sum(&mut g, y, 1).unwrap();
    let grads = g.backward(f).unwrap();
    assert!(grads.get(params[3]).unwrap().iter().all(|v| v.abs() < 1e-12));
}

fn identity_weights(g: &mut Graph, c: usize) -> AttentionWeights {
    let mut eye = Tensor::zeros(&[c, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    let w = g.constant(eye);
    let b = g.constant(Tensor::zeros(&[c]));
    AttentionWeights { wq: w, bq: b, wk: w, bk: Some(b), wv: w, bv: b, wo: w, bo: b }
}

#[test]
fn msa_single_token_identity() {
    let mut g = Graph::new();
    let w = identity_weights(&mut g, 4);
    let x = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
    let y = multi_head_self_attention(&mut g, x, &w, 1).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-15);
}

#[test]
fn msa_identical_rows_give_identical_outputs() {
    let mut r = rng(5);
    let mut g = Graph::new();
    let params: Vec<Var> = attention_inputs(&mut r, 8).into_iter().map(|t| g.constant(t)).collect();
    let w = attention_weights(&params);
    let row = Tensor::randn(&[8], 1.0, &mut r);
    let mut data = row.data().to_vec();
    data.extend_from_slice(row.data());
    let x = g.constant(Tensor::new(vec![2, 8], data).unwrap());
    let y = multi_head_self_attention(&mut g, x, &w, 4).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..8], &v[8..]);
}

#[test]
fn msa_is_permutation_equivariant() {
    let perm = [2, 0, 3, 1];
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut g = Graph::new();
        let params: Vec<Var> = attention_inputs(&mut r, 8).into_iter().map(|t| g.constant(t)).collect();
        let w = attention_weights(&params);
        let x = g.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        let y = multi_head_self_attention(&mut g, x, &w, 2).unwrap();
        let xp = g.index_select(x, &perm).unwrap();
        let yp = multi_head_self_attention(&mut g, xp, &w, 2).unwrap();
        let y_then_p = g.index_select(y, &perm).unwrap();
        assert!(g.value(yp).max_abs_diff(g.value(y_then_p)) < 1e-10);
    }
}

#[test]
fn msa_rejects_indivisible_heads() {
    let mut g = Graph::new();
    let w = identity_weights(&mut g, 6);
    let x = g.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(
        multi_head_self_attention(&mut g, x, &w, 4),
        Err(trackletvis::numerics::NumericsError::Config(_))
    ));
}

#[test]
fn conv_is_linear_in_the_map() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let mut g = Graph::new();
        let f = g.constant(Tensor::randn(&[3, 3, 2, 3], 1.0, &mut r));
        let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let x = g.constant(Tensor::randn(&[6, 5, 2], 1.0, &mut r));
        let y = g.constant(Tensor::randn(&[6, 5, 2], 1.0, &mut r));
        let ax = g.mul_scalar(x, a);
        let by = g.mul_scalar(y, b);
        let mix = g.add(ax, by).unwrap();
        let lhs = g.conv2d(f, mix, 1, Padding::Zero).unwrap();
        let cx = g.conv2d(f, x, 1, Padding::Zero).unwrap();
        let cy = g.conv2d(f, y, 1, Padding::Zero).unwrap();
        let acx = g.mul_scalar(cx, a);
        let bcy = g.mul_scalar(cy, b);
        let rhs = g.add(acx, bcy).unwrap();
        assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-10);
    }
}

/// Direct bilinear interpolation at a continuous feature-cell coordinate.
fn bilinear(feat: &Tensor, u: f64, v: f64) -> f64 {
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (lu, lv) = (u - u0 as f64, v - v0 as f64);
    let f = |y: usize, x: usize| feat.at(&[0, y, x, 0]);
    (1.0 - lv) * ((1.0 - lu) * f(v0, u0) + lu * f(v0, u0 + 1)) + lv * ((1.0 - lu) * f(v0 + 1, u0) + lu * f(v0 + 1, u0 + 1))
}

#[test]
fn roi_inside_one_cell_matches_direct_bilinear() {
    let mut r = rng(9);
    let feat = Tensor::randn(&[1, 4, 4, 1], 1.0, &mut r);
    // box in feature pixels; centres of cells sit at integer + 0.5
    let b = [1.6, 2.55, 2.4, 3.35];
    let mut g = Graph::new();
    let fv = g.constant(feat.clone());
    let bv = g.constant(Tensor::new(vec![1, 4], b.to_vec()).unwrap());
    let out = g.roi_align(fv, bv, &[0], 2, 2, 1.0, (4.0, 4.0)).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let x = b[0] + (j as f64 + 0.5) / 2.0 * (b[2] - b[0]);
            let y = b[1] + (i as f64 + 0.5) / 2.0 * (b[3] - b[1]);
            let want = bilinear(&feat, x - 0.5, y - 0.5);
            assert!((g.value(out).at(&[0, i, j, 0]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences_tightly() {
    let report = grad_check(
        |g, v| {
            let s = g.softmax(v[0], 0)?;
            let first = g.index_select(s, &[0])?;
            Ok(g.sum(first))
        },
        &[Tensor::from_vec(vec![0.2, -0.4, 1.1])],
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
