//! Spatial kernels on channel-last maps: convolution, RoI align, mask pasting.

use super::graph::{Graph, Var};
use super::ops::dot;
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Nearest edge pixel; constant maps stay constant.
    Replicate,
}

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
pub type BoxCorners = [f64; 4];

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    per_sample_filter: bool,
    padding: Padding,
}

impl ConvGeom {
    /// Input coordinate for output `o` and tap `kk`, or `None` for a zero tap.
    #[inline]
    fn tap(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - (self.k / 2) as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            match self.padding {
                Padding::Zero => None,
                Padding::Replicate => Some(pos.clamp(0, extent as isize - 1) as usize),
            }
        }
    }

    fn filter_len(&self) -> usize {
        self.k * self.k * self.cin * self.cout
    }
}

/// Below this many output channels the kernels iterate over input channels
/// innermost, using the filter transposed to `[k,k,Cout,Cin]`.
const NARROW_COUT: usize = 8;

/// `[k,k,Cin,Cout]` blocks to `[k,k,Cout,Cin]`.
fn transpose_filter(w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for (blk, src) in w.chunks(cin * cout).enumerate() {
        let dst = &mut t[blk * cin * cout..(blk + 1) * cin * cout];
        for ci in 0..cin {
            for co in 0..cout {
                dst[co * cin + ci] = src[ci * cout + co];
            }
        }
    }
    t
}

fn conv_forward(x: &[f64], w: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom { batch, h, w: width, cin, cout, k, oh, ow, .. } = *geom;
    let narrow = cout < NARROW_COUT;
    let wt = narrow.then(|| transpose_filter(w, cin, cout));
    let mut out = vec![0.0; batch * oh * ow * cout];
    for b in 0..batch {
        let f_base = if geom.per_sample_filter { b * geom.filter_len() } else { 0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let o_off = ((b * oh + oy) * ow + ox) * cout;
                let out_px = &mut out[o_off..o_off + cout];
                for ky in 0..k {
                    let Some(iy) = geom.tap(oy, ky, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = geom.tap(ox, kx, width) else { continue };
                        let x_off = ((b * h + iy) * width + ix) * cin;
                        let x_px = &x[x_off..x_off + cin];
                        let w_off = f_base + (ky * k + kx) * cin * cout;
                        if let Some(wt) = wt.as_ref() {
                            for (co, o) in out_px.iter_mut().enumerate() {
                                *o += dot(x_px, &wt[w_off + co * cin..w_off + (co + 1) * cin]);
                            }
                            continue;
                        }
                        for (ci, &xv) in x_px.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let w_row = &w[w_off + ci * cout..w_off + (ci + 1) * cout];
                            for (o, wv) in out_px.iter_mut().zip(w_row) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    geom: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvGeom { batch, h, w: width, cin, cout, k, oh, ow, .. } = *geom;
    let narrow = cout < NARROW_COUT;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    // narrow filters are handled transposed, wide ones in place
    let wt = if narrow { transpose_filter(w, cin, cout) } else { Vec::new() };
    let flen = geom.filter_len();
    for b in 0..batch {
        let f_base = if geom.per_sample_filter { b * flen } else { 0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let o_off = ((b * oh + oy) * ow + ox) * cout;
                let g_px = &grad[o_off..o_off + cout];
                if g_px.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for ky in 0..k {
                    let Some(iy) = geom.tap(oy, ky, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = geom.tap(ox, kx, width) else { continue };
                        let x_off = ((b * h + iy) * width + ix) * cin;
                        let w_off = f_base + (ky * k + kx) * cin * cout;
                        if narrow {
                            let x_px = &x[x_off..x_off + cin];
                            for (co, &gv) in g_px.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let row = w_off + co * cin..w_off + (co + 1) * cin;
                                if let Some(dx) = dx.as_mut() {
                                    for (d, wv) in dx[x_off..x_off + cin].iter_mut().zip(&wt[row.clone()]) {
                                        *d += gv * wv;
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    // accumulated transposed, flipped back below
                                    for (d, xv) in dw[row].iter_mut().zip(x_px) {
                                        *d += gv * xv;
                                    }
                                }
                            }
                            continue;
                        }
                        for ci in 0..cin {
                            let w_row = w_off + ci * cout..w_off + (ci + 1) * cout;
                            if let Some(dx) = dx.as_mut() {
                                dx[x_off + ci] += dot(g_px, &w[w_row.clone()]);
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xv = x[x_off + ci];
                                if xv != 0.0 {
                                    for (d, g) in dw[w_row].iter_mut().zip(g_px) {
                                        *d += xv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if narrow {
        dw = dw.map(|d| transpose_filter(&d, cout, cin));
    }
    (dx, dw)
}

impl Graph {
    /// 2-D cross-correlation with "same" padding (`k/2` each side).
    ///
    /// `x` is `[H,W,Cin]` or `[B,H,W,Cin]`. `filter` is `[k,k,Cin,Cout]`, shared by
    /// the batch, or `[B,k,k,Cin,Cout]` with one filter per batch element. The
    /// output has spatial size `ceil(H/stride) x ceil(W/stride)`.
    pub fn conv2d(&mut self, filter: Var, x: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let fs = self.shape(filter).to_vec();
        let batched = xs.len() == 4;
        let (batch, h, w, cin) = match *xs.as_slice() {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(NumericsError::Shape(format!("conv2d input {xs:?}"))),
        };
        let (per_sample_filter, k, fcin, cout) = match *fs.as_slice() {
            [k1, k2, ci, co] if k1 == k2 => (false, k1, ci, co),
            [b, k1, k2, ci, co] if k1 == k2 && b == batch => (true, k1, ci, co),
            _ => return Err(NumericsError::Shape(format!("conv2d filter {fs:?} for input {xs:?}"))),
        };
        if k % 2 == 0 {
            return Err(NumericsError::Shape(format!("conv2d needs an odd kernel, got {k}")));
        }
        if fcin != cin {
            return Err(NumericsError::ChannelMismatch { expected: fcin, got: cin });
        }
        if stride == 0 {
            return Err(NumericsError::Shape("conv2d stride 0".into()));
        }
        let geom = ConvGeom {
            batch,
            h,
            w,
            cin,
            cout,
            k,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            per_sample_filter,
            padding,
        };
        let out = conv_forward(self.value(x).data(), self.value(filter).data(), &geom);
        let shape = if batched { vec![batch, geom.oh, geom.ow, cout] } else { vec![geom.oh, geom.ow, cout] };
        Ok(self.custom_op(
            "conv2d",
            Tensor::from_parts(shape, out),
            &[filter, x],
            Box::new(move |a| {
                let (dx, dw) = conv_backward(
                    a.inputs[1].data(),
                    a.inputs[0].data(),
                    a.grad,
                    &geom,
                    a.needs[1],
                    a.needs[0],
                );
                vec![dw, dx]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[B,H,W,C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let &[b, h, w, c] = self.shape(x) else {
            return Err(NumericsError::Shape(format!("upsample2x {:?}", self.shape(x))));
        };
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = ((bi * h + y / 2) * w + xx / 2) * c;
                    let d = ((bi * oh + y) * ow + xx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Ok(self.custom_op(
            "upsample2x",
            Tensor::from_parts(vec![b, oh, ow, c], out),
            &[x],
            Box::new(move |a| {
                let mut d = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let s = ((bi * h + y / 2) * w + xx / 2) * c;
                            let g = ((bi * oh + y) * ow + xx) * c;
                            for j in 0..c {
                                d[s + j] += a.grad[g + j];
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// RoI align with one bilinear sample at the centre of every output cell.
    ///
    /// `features` is `[F,H,W,C]`; RoI `r` reads frame `frame_of_roi[r]` through
    /// box `boxes[r]`, given in frame pixels and clamped to `frame_size`
    /// (`(width, height)`) first. `spatial_scale` maps frame pixels to feature
    /// cells (1/4 for a stride-4 backbone). Output is `[R,out_h,out_w,C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn roi_align(
        &mut self,
        features: Var,
        boxes: Var,
        frame_of_roi: &[usize],
        out_h: usize,
        out_w: usize,
        spatial_scale: f64,
        frame_size: (f64, f64),
    ) -> Result<Var> {
        let &[frames, h, w, c] = self.shape(features) else {
            return Err(NumericsError::Shape(format!("roi_align features {:?}", self.shape(features))));
        };
        let rois = frame_of_roi.len();
        if self.shape(boxes) != [rois, 4] || frame_of_roi.iter().any(|&f| f >= frames) {
            return Err(NumericsError::Shape(format!(
                "roi_align boxes {:?} for {rois} rois over {frames} frames",
                self.shape(boxes)
            )));
        }
        let plan = RoiPlan::new(self.value(boxes).data(), frame_of_roi, out_h, out_w, spatial_scale, frame_size, (h, w))?;
        let feat = self.value(features).data();
        let mut out = vec![0.0; rois * out_h * out_w * c];
        for (cell, s) in plan.samples.iter().enumerate() {
            let px = |tap: usize| &feat[tap * c..(tap + 1) * c];
            let (a, b, cc, d) = (px(s.t00), px(s.t01), px(s.t10), px(s.t11));
            // nested lerps keep constant maps exactly constant
            for (j, o) in out[cell * c..(cell + 1) * c].iter_mut().enumerate() {
                let top = a[j] + s.lu * (b[j] - a[j]);
                let bottom = cc[j] + s.lu * (d[j] - cc[j]);
                *o = top + s.lv * (bottom - top);
            }
        }
        let n_feat = frames * h * w * c;
        Ok(self.custom_op(
            "roi_align",
            Tensor::from_parts(vec![rois, out_h, out_w, c], out),
            &[features, boxes],
            Box::new(move |a| {
                let feat = a.inputs[0].data();
                let mut dfeat = a.needs[0].then(|| vec![0.0; n_feat]);
                let mut dbox = a.needs[1].then(|| vec![0.0; rois * 4]);
                for (cell, s) in plan.samples.iter().enumerate() {
                    let g = &a.grad[cell * c..(cell + 1) * c];
                    if let Some(df) = dfeat.as_mut() {
                        for (tap, wt) in s.taps() {
                            df[tap * c..(tap + 1) * c].iter_mut().zip(g).for_each(|(d, gv)| *d += wt * gv);
                        }
                    }
                    if let Some(db) = dbox.as_mut() {
                        let val = |tap: usize| dot(g, &feat[tap * c..(tap + 1) * c]);
                        let (v00, v01, v10, v11) = (val(s.t00), val(s.t01), val(s.t10), val(s.t11));
                        // d(sample)/du and d(sample)/dv in feature cells
                        let d_u = if s.u_free { (1.0 - s.lv) * (v01 - v00) + s.lv * (v11 - v10) } else { 0.0 };
                        let d_v = if s.v_free { (1.0 - s.lu) * (v10 - v00) + s.lu * (v11 - v01) } else { 0.0 };
                        let r = s.roi;
                        let (fx1, fx2, fy1, fy2) = plan.box_jac[r];
                        let gx = d_u * spatial_scale;
                        let gy = d_v * spatial_scale;
                        db[r * 4] += gx * (1.0 - s.fx) * fx1;
                        db[r * 4 + 2] += gx * s.fx * fx2;
                        db[r * 4 + 1] += gy * (1.0 - s.fy) * fy1;
                        db[r * 4 + 3] += gy * s.fy * fy2;
                    }
                }
                vec![dfeat, dbox]
            }),
        ))
    }

    /// Pastes `[R,Hm,Wm]` mask values into `[R,H,W]` frame canvases through
    /// `boxes [R,4]`. Each frame pixel centre is mapped into mask coordinates and
    /// sampled bilinearly with zero padding, so the result is continuous in both
    /// the mask values and the box, and zero away from the box.
    pub fn paste_masks(&mut self, masks: Var, boxes: Var, frame_h: usize, frame_w: usize) -> Result<Var> {
        let &[rois, mh, mw] = self.shape(masks) else {
            return Err(NumericsError::Shape(format!("paste_masks masks {:?}", self.shape(masks))));
        };
        if self.shape(boxes) != [rois, 4] {
            return Err(NumericsError::Shape(format!("paste_masks boxes {:?}", self.shape(boxes))));
        }
        let bv = self.value(boxes).data().to_vec();
        for r in 0..rois {
            let b = &bv[r * 4..r * 4 + 4];
            if !(b[2] > b[0] && b[3] > b[1]) || b.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::DegenerateRoi(format!("paste box {b:?}")));
            }
        }
        let mv = self.value(masks).data();
        let mut out = vec![0.0; rois * frame_h * frame_w];
        let plane = frame_h * frame_w;
        for r in 0..rois {
            let m = &mv[r * mh * mw..(r + 1) * mh * mw];
            for_each_paste_pixel(&bv[r * 4..r * 4 + 4], (mh, mw), (frame_h, frame_w), |px, s| {
                out[r * plane + px] = s.sample(m);
            });
        }
        Ok(self.custom_op(
            "paste_masks",
            Tensor::from_parts(vec![rois, frame_h, frame_w], out),
            &[masks, boxes],
            Box::new(move |a| {
                let mv = a.inputs[0].data();
                let bv = a.inputs[1].data();
                let mut dm = a.needs[0].then(|| vec![0.0; rois * mh * mw]);
                let mut db = a.needs[1].then(|| vec![0.0; rois * 4]);
                for r in 0..rois {
                    let m = &mv[r * mh * mw..(r + 1) * mh * mw];
                    let b = &bv[r * 4..r * 4 + 4];
                    for_each_paste_pixel(b, (mh, mw), (frame_h, frame_w), |px, s| {
                        let g = a.grad[r * plane + px];
                        if g == 0.0 {
                            return;
                        }
                        if let Some(dm) = dm.as_mut() {
                            s.scatter(&mut dm[r * mh * mw..(r + 1) * mh * mw], g);
                        }
                        if let Some(db) = db.as_mut() {
                            let (du, dv) = s.gradient(m);
                            db[r * 4] += g * du * s.du_dx1;
                            db[r * 4 + 2] += g * du * s.du_dx2;
                            db[r * 4 + 1] += g * dv * s.dv_dy1;
                            db[r * 4 + 3] += g * dv * s.dv_dy2;
                        }
                    });
                }
                vec![dm, db]
            }),
        ))
    }
}

/// Bilinear sample point inside a RoI.
struct RoiSample {
    roi: usize,
    // flat pixel indices (frame, y, x) of the four taps
    t00: usize,
    t01: usize,
    t10: usize,
    t11: usize,
    lu: f64,
    lv: f64,
    u_free: bool,
    v_free: bool,
    // relative position of the sample inside the clamped box, in [0,1]
    fx: f64,
    fy: f64,
}

impl RoiSample {
    fn taps(&self) -> [(usize, f64); 4] {
        let (lu, lv) = (self.lu, self.lv);
        [
            (self.t00, (1.0 - lu) * (1.0 - lv)),
            (self.t01, lu * (1.0 - lv)),
            (self.t10, (1.0 - lu) * lv),
            (self.t11, lu * lv),
        ]
    }
}

struct RoiPlan {
    samples: Vec<RoiSample>,
    // d(clamped coord)/d(raw coord) for x1, x2, y1, y2
    box_jac: Vec<(f64, f64, f64, f64)>,
}

/// Clamps `v` into `[0, hi]`, returning the value and its derivative.
fn clamp_with_jac(v: f64, hi: f64) -> (f64, f64) {
    if v <= 0.0 {
        (0.0, 0.0)
    } else if v >= hi {
        (hi, 0.0)
    } else {
        (v, 1.0)
    }
}

/// Splits a continuous cell coordinate into (low index, high index, frac, in-range flag).
fn bilinear_axis(u: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    if u <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if u >= max {
        return (extent - 1, extent - 1, 0.0, false);
    }
    let lo = u.floor() as usize;
    (lo, lo + 1, u - lo as f64, true)
}

impl RoiPlan {
    fn new(
        boxes: &[f64],
        frame_of_roi: &[usize],
        out_h: usize,
        out_w: usize,
        scale: f64,
        (frame_w, frame_h): (f64, f64),
        (h, w): (usize, usize),
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(frame_of_roi.len() * out_h * out_w);
        let mut box_jac = Vec::with_capacity(frame_of_roi.len());
        for (r, &f) in frame_of_roi.iter().enumerate() {
            let b = &boxes[r * 4..r * 4 + 4];
            if b.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::DegenerateRoi(format!("non-finite box {b:?}")));
            }
            let (x1, jx1) = clamp_with_jac(b[0], frame_w);
            let (y1, jy1) = clamp_with_jac(b[1], frame_h);
            let (x2, jx2) = clamp_with_jac(b[2], frame_w);
            let (y2, jy2) = clamp_with_jac(b[3], frame_h);
            if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
                return Err(NumericsError::DegenerateRoi(format!("box {b:?} after clamping")));
            }
            box_jac.push((jx1, jx2, jy1, jy2));
            for i in 0..out_h {
                let fy = (i as f64 + 0.5) / out_h as f64;
                let v = (y1 + fy * (y2 - y1)) * scale - 0.5;
                let (v0, v1, lv, v_free) = bilinear_axis(v, h);
                for j in 0..out_w {
                    let fx = (j as f64 + 0.5) / out_w as f64;
                    let u = (x1 + fx * (x2 - x1)) * scale - 0.5;
                    let (u0, u1, lu, u_free) = bilinear_axis(u, w);
                    let px = |y: usize, x: usize| (f * h + y) * w + x;
                    samples.push(RoiSample {
                        roi: r,
                        t00: px(v0, u0),
                        t01: px(v0, u1),
                        t10: px(v1, u0),
                        t11: px(v1, u1),
                        lu,
                        lv,
                        u_free,
                        v_free,
                        fx,
                        fy,
                    });
                }
            }
        }
        Ok(Self { samples, box_jac })
    }
}

/// One frame pixel's bilinear lookup into a mask grid with zero padding.
struct PasteSample {
    u0: isize,
    v0: isize,
    lu: f64,
    lv: f64,
    mh: usize,
    mw: usize,
    du_dx1: f64,
    du_dx2: f64,
    dv_dy1: f64,
    dv_dy2: f64,
}

impl PasteSample {
    fn at(&self, m: &[f64], v: isize, u: isize) -> f64 {
        if v >= 0 && u >= 0 && (v as usize) < self.mh && (u as usize) < self.mw {
            m[v as usize * self.mw + u as usize]
        } else {
            0.0
        }
    }

    fn sample(&self, m: &[f64]) -> f64 {
        let (u, v, lu, lv) = (self.u0, self.v0, self.lu, self.lv);
        (1.0 - lv) * ((1.0 - lu) * self.at(m, v, u) + lu * self.at(m, v, u + 1))
            + lv * ((1.0 - lu) * self.at(m, v + 1, u) + lu * self.at(m, v + 1, u + 1))
    }

    fn gradient(&self, m: &[f64]) -> (f64, f64) {
        let (u, v, lu, lv) = (self.u0, self.v0, self.lu, self.lv);
        let (a, b, c, d) = (self.at(m, v, u), self.at(m, v, u + 1), self.at(m, v + 1, u), self.at(m, v + 1, u + 1));
        ((1.0 - lv) * (b - a) + lv * (d - c), (1.0 - lu) * (c - a) + lu * (d - b))
    }

    fn scatter(&self, dm: &mut [f64], g: f64) {
        let (u, v, lu, lv) = (self.u0, self.v0, self.lu, self.lv);
        for (dv, du, w) in [
            (0, 0, (1.0 - lv) * (1.0 - lu)),
            (0, 1, (1.0 - lv) * lu),
            (1, 0, lv * (1.0 - lu)),
            (1, 1, lv * lu),
        ] {
            let (vv, uu) = (v + dv, u + du);
            if vv >= 0 && uu >= 0 && (vv as usize) < self.mh && (uu as usize) < self.mw {
                dm[vv as usize * self.mw + uu as usize] += g * w;
            }
        }
    }
}

fn for_each_paste_pixel(
    b: &[f64],
    (mh, mw): (usize, usize),
    (frame_h, frame_w): (usize, usize),
    mut f: impl FnMut(usize, &PasteSample),
) {
    let (x1, y1, x2, y2) = (b[0], b[1], b[2], b[3]);
    let (bw, bh) = (x2 - x1, y2 - y1);
    // mask coordinate u = (p - x1) / bw * mw - 0.5 is nonzero only for u in (-1, mw)
    let px_lo = (x1 - 0.5 * bw / mw as f64 - 0.5).floor().max(0.0) as usize;
    let px_hi = ((x2 + 0.5 * bw / mw as f64 - 0.5).ceil().max(0.0) as usize).min(frame_w.saturating_sub(1));
    let py_lo = (y1 - 0.5 * bh / mh as f64 - 0.5).floor().max(0.0) as usize;
    let py_hi = ((y2 + 0.5 * bh / mh as f64 - 0.5).ceil().max(0.0) as usize).min(frame_h.saturating_sub(1));
    if px_lo >= frame_w || py_lo >= frame_h {
        return;
    }
    for py in py_lo..=py_hi {
        let p = py as f64 + 0.5;
        let v = (p - y1) / bh * mh as f64 - 0.5;
        if v <= -1.0 || v >= mh as f64 {
            continue;
        }
        let v0 = v.floor();
        let dv_dy1 = mh as f64 * (p - y2) / (bh * bh);
        let dv_dy2 = -(mh as f64) * (p - y1) / (bh * bh);
        for px in px_lo..=px_hi {
            let q = px as f64 + 0.5;
            let u = (q - x1) / bw * mw as f64 - 0.5;
            if u <= -1.0 || u >= mw as f64 {
                continue;
            }
            let u0 = u.floor();
            let s = PasteSample {
                u0: u0 as isize,
                v0: v0 as isize,
                lu: u - u0,
                lv: v - v0,
                mh,
                mw,
                du_dx1: mw as f64 * (q - x2) / (bw * bw),
                du_dx2: -(mw as f64) * (q - x1) / (bw * bw),
                dv_dy1,
                dv_dy2,
            };
            f(py * frame_w + px, &s);
        }
    }
}
