//! Box parameterisations as graph ops. Both decode centre/size into corners
//! with the centre clamped into the frame and the size bounded below by one
//! pixel, so every produced box is a valid RoI.

use crate::numerics::{Graph, NumericsError, Result, Tensor, Var};

/// Largest log-scale step a single regression may take.
pub const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Clone, Copy)]
struct Clamped {
    value: f64,
    free: bool,
}

fn clamp(v: f64, lo: f64, hi: f64) -> Clamped {
    if v < lo {
        Clamped { value: lo, free: false }
    } else if v > hi {
        Clamped { value: hi, free: false }
    } else {
        Clamped { value: v, free: true }
    }
}

/// Centre/size in pixels to corners, with frame clamps. Returns the four
/// clamped quantities so backward can zero the saturated ones.
fn to_corners(cx: f64, cy: f64, w: f64, h: f64, fw: f64, fh: f64) -> ([f64; 4], [Clamped; 4]) {
    let c = [clamp(cx, 0.0, fw), clamp(cy, 0.0, fh), clamp(w, 1.0, 2.0 * fw), clamp(h, 1.0, 2.0 * fh)];
    let (cx, cy, w, h) = (c[0].value, c[1].value, c[2].value, c[3].value);
    ([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], c)
}

/// Gradient of the corners with respect to the unclamped centre and size.
fn corner_grad(g: &[f64], c: &[Clamped; 4]) -> [f64; 4] {
    let free = |k: usize, v: f64| if c[k].free { v } else { 0.0 };
    [
        free(0, g[0] + g[2]),
        free(1, g[1] + g[3]),
        free(2, (g[2] - g[0]) / 2.0),
        free(3, (g[3] - g[1]) / 2.0),
    ]
}

fn check_rows(g: &Graph, x: Var, what: &str) -> Result<usize> {
    match g.shape(x) {
        &[r, 4] => Ok(r),
        s => Err(NumericsError::Shape(format!("{what}: expected [R,4], got {s:?}"))),
    }
}

/// Boxes stored as `(cx, cy, w, h)` in frame-relative units to pixel corners.
pub fn relative_to_corners(g: &mut Graph, rel: Var, frame_w: f64, frame_h: f64) -> Result<Var> {
    let rows = check_rows(g, rel, "relative_to_corners")?;
    let src = g.value(rel).data();
    let mut out = Vec::with_capacity(rows * 4);
    let mut clamps = Vec::with_capacity(rows);
    for r in src.chunks(4) {
        let (b, c) = to_corners(r[0] * frame_w, r[1] * frame_h, r[2] * frame_w, r[3] * frame_h, frame_w, frame_h);
        out.extend_from_slice(&b);
        clamps.push(c);
    }
    Ok(g.custom_op(
        "relative_to_corners",
        Tensor::new(vec![rows, 4], out)?,
        &[rel],
        Box::new(move |a| {
            let mut d = vec![0.0; rows * 4];
            for (r, c) in clamps.iter().enumerate() {
                let gc = corner_grad(&a.grad[r * 4..r * 4 + 4], c);
                let scale = [frame_w, frame_h, frame_w, frame_h];
                for k in 0..4 {
                    d[r * 4 + k] = gc[k] * scale[k];
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Applies regression deltas `(dx, dy, dw, dh)` to corner boxes: the centre
/// moves by `dx·w`, the width scales by `exp(dw)`. Zero deltas return the
/// input boxes unchanged.
pub fn apply_deltas(g: &mut Graph, boxes: Var, deltas: Var, frame_w: f64, frame_h: f64) -> Result<Var> {
    let rows = check_rows(g, boxes, "apply_deltas")?;
    if g.shape(deltas) != [rows, 4] {
        return Err(NumericsError::Shape(format!("apply_deltas: deltas {:?}", g.shape(deltas))));
    }
    let (bv, dv) = (g.value(boxes).data(), g.value(deltas).data());
    let mut out = Vec::with_capacity(rows * 4);
    let mut saved = Vec::with_capacity(rows);
    for r in 0..rows {
        let b = &bv[r * 4..r * 4 + 4];
        let d = &dv[r * 4..r * 4 + 4];
        let (pw, ph) = (b[2] - b[0], b[3] - b[1]);
        let (pcx, pcy) = (b[0] + pw / 2.0, b[1] + ph / 2.0);
        let (sw, sh) = (clamp(d[2], f64::NEG_INFINITY, MAX_LOG_SCALE), clamp(d[3], f64::NEG_INFINITY, MAX_LOG_SCALE));
        let (ew, eh) = (sw.value.exp(), sh.value.exp());
        let (corners, c) = to_corners(pcx + d[0] * pw, pcy + d[1] * ph, pw * ew, ph * eh, frame_w, frame_h);
        out.extend_from_slice(&corners);
        saved.push((c, [pw, ph, ew, eh], [sw.free, sh.free]));
    }
    Ok(g.custom_op(
        "apply_deltas",
        Tensor::new(vec![rows, 4], out)?,
        &[boxes, deltas],
        Box::new(move |a| {
            let dv = a.inputs[1].data();
            let mut db = vec![0.0; rows * 4];
            let mut dd = vec![0.0; rows * 4];
            for (r, (c, [pw, ph, ew, eh], free)) in saved.iter().enumerate() {
                let [gcx, gcy, gw, gh] = corner_grad(&a.grad[r * 4..r * 4 + 4], c);
                let d = &dv[r * 4..r * 4 + 4];
                dd[r * 4] = gcx * pw;
                dd[r * 4 + 1] = gcy * ph;
                dd[r * 4 + 2] = if free[0] { gw * pw * ew } else { 0.0 };
                dd[r * 4 + 3] = if free[1] { gh * ph * eh } else { 0.0 };
                let d_pw = gcx * d[0] + gw * ew;
                let d_ph = gcy * d[1] + gh * eh;
                db[r * 4] = gcx / 2.0 - d_pw;
                db[r * 4 + 2] = gcx / 2.0 + d_pw;
                db[r * 4 + 1] = gcy / 2.0 - d_ph;
                db[r * 4 + 3] = gcy / 2.0 + d_ph;
            }
            vec![a.needs[0].then_some(db), a.needs[1].then_some(dd)]
        }),
    ))
}
