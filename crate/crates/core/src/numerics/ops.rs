//! Dense differentiable ops on [`Graph`].

use super::graph::{Graph, Var};
use super::tensor::{numel, strides, Tensor};
use super::{NumericsError, Result};

// c += a·b with a [m,k], b [k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// c += a·bᵀ with a [m,k], b [n,k]
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

// c += aᵀ·b with a [k,m], b [k,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the compiler can vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(NumericsError::Shape(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl Graph {
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: fn(x: f64, y: f64) -> f64,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom_op(
            op,
            value,
            &[x],
            Box::new(move |a| {
                let g = a
                    .grad
                    .iter()
                    .zip(a.inputs[0].data())
                    .zip(a.output.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom_op(
            "add",
            value,
            &[a, b],
            Box::new(|a| vec![a.needs[0].then(|| a.grad.to_vec()), a.needs[1].then(|| a.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom_op(
            "sub",
            value,
            &[a, b],
            Box::new(|a| {
                vec![
                    a.needs[0].then(|| a.grad.to_vec()),
                    a.needs[1].then(|| a.grad.iter().map(|g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom_op(
            "mul",
            value,
            &[a, b],
            Box::new(|a| {
                let prod = |other: &Tensor| a.grad.iter().zip(other.data()).map(|(g, y)| g * y).collect();
                vec![a.needs[0].then(|| prod(a.inputs[1])), a.needs[1].then(|| prod(a.inputs[0]))]
            }),
        ))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.custom_op(
            "mul_scalar",
            value,
            &[x],
            Box::new(move |a| vec![Some(a.grad.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.custom_op("add_scalar", value, &[x], Box::new(|a| vec![Some(a.grad.to_vec())]))
    }

    /// `x [..., C] + bias [C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(NumericsError::Shape(format!(
                "add_bias: {:?} + {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let vb = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&vb).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.custom_op(
            "add_bias",
            value,
            &[x, bias],
            Box::new(move |a| {
                let db = a.needs[1].then(|| {
                    let mut db = vec![0.0; c];
                    for row in a.grad.chunks(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    db
                });
                vec![a.needs[0].then(|| a.grad.to_vec()), db]
            }),
        ))
    }

    /// `x [B, ..., C] + bias [B, C]`: one bias row per leading index.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(bias) != [xs[0], xs[xs.len() - 1]] {
            return Err(NumericsError::Shape(format!("add_row_bias: {xs:?} + {:?}", self.shape(bias))));
        }
        let (b, c) = (xs[0], xs[xs.len() - 1]);
        let per = numel(&xs[1..]);
        let vb = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, block) in data.chunks_mut(per.max(1)).enumerate() {
            for row in block.chunks_mut(c.max(1)) {
                row.iter_mut().zip(&vb[i * c..(i + 1) * c]).for_each(|(v, b)| *v += b);
            }
        }
        Ok(self.custom_op(
            "add_row_bias",
            Tensor::from_parts(xs, data),
            &[x, bias],
            Box::new(move |a| {
                let db = a.needs[1].then(|| {
                    let mut db = vec![0.0; b * c];
                    for (i, block) in a.grad.chunks(per.max(1)).enumerate() {
                        for row in block.chunks(c.max(1)) {
                            db[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                    db
                });
                vec![a.needs[0].then(|| a.grad.to_vec()), db]
            }),
        ))
    }

    /// `w [...] ⊙ x [..., C]`, broadcasting `w` over the last axis of `x`.
    pub fn scale_channels(&mut self, w: Var, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(w) != &xs[..xs.len() - 1] {
            return Err(NumericsError::Shape(format!(
                "scale_channels: {:?} by {:?}",
                xs,
                self.shape(w)
            )));
        }
        let c = *xs.last().unwrap();
        let (vw, vx) = (self.value(w), self.value(x));
        let mut data = vx.data().to_vec();
        for (row, &s) in data.chunks_mut(c.max(1)).zip(vw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.custom_op(
            "scale_channels",
            value,
            &[w, x],
            Box::new(move |a| {
                let (w, x) = (a.inputs[0].data(), a.inputs[1].data());
                let dw = a.needs[0].then(|| {
                    a.grad.chunks(c.max(1)).zip(x.chunks(c.max(1))).map(|(g, x)| dot(g, x)).collect()
                });
                let dx = a.needs[1].then(|| {
                    let mut dx = a.grad.to_vec();
                    for (row, &s) in dx.chunks_mut(c.max(1)).zip(w) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    dx
                });
                vec![dw, dx]
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            "sigmoid",
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary("abs", x, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.custom_op(
            "clamp",
            value,
            &[x],
            Box::new(move |a| {
                let g = a
                    .grad
                    .iter()
                    .zip(a.inputs[0].data())
                    .map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.custom_op(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |ar| {
                let (av, bv) = (ar.inputs[0].data(), ar.inputs[1].data());
                let da = ar.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(ar.grad, bv, &mut d, m, n, k);
                    d
                });
                let db = ar.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(av, ar.grad, &mut d, k, m, n);
                    d
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched product of `a [B,m,k]` with `b [B,k,n]`, or with `b [B,n,k]`
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || NumericsError::Shape(format!("bmm: {sa:?} x {sb:?} (transpose_b={transpose_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let kb = if transpose_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = &bv[bi * k * n..(bi + 1) * k * n];
                let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                if transpose_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        Ok(self.custom_op(
            "bmm",
            Tensor::from_parts(vec![batch, m, n], out),
            &[a, b],
            Box::new(move |ar| {
                let (av, bv) = (ar.inputs[0].data(), ar.inputs[1].data());
                let mut da = ar.needs[0].then(|| vec![0.0; batch * m * k]);
                let mut db = ar.needs[1].then(|| vec![0.0; batch * k * n]);
                for bi in 0..batch {
                    let gc = &ar.grad[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        let d = &mut da[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gc, bb, d, m, n, k);
                        } else {
                            gemm_nt(gc, bb, d, m, n, k);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let d = &mut db[bi * k * n..(bi + 1) * k * n];
                        if transpose_b {
                            gemm_tn(gc, ab, d, n, m, k);
                        } else {
                            gemm_tn(ab, gc, d, k, m, n);
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.custom_op("reshape", value, &[x], Box::new(|a| vec![Some(a.grad.to_vec())])))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::Shape(format!("permute {shape:?} by {axes:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(self.custom_op(
            "permute",
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |a| vec![Some(permute_data(a.grad, &out_shape_c, &inverse).1)]),
        ))
    }

    /// Gathers rows along axis 0 (indices may repeat).
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(NumericsError::Shape(format!("index_select {indices:?} from {shape:?}")));
        }
        let row = numel(&shape[1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        let n_in = numel(&shape);
        Ok(self.custom_op(
            "index_select",
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |a| {
                let mut d = vec![0.0; n_in];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &a.grad[r * row..(r + 1) * row];
                    d[i * row..(i + 1) * row].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?).to_vec();
        let mut rows = 0;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NumericsError::Shape(format!("concat {s:?} with {first:?}")));
            }
            rows += s[0];
            sizes.push(self.value(x).numel());
        }
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.custom_op(
            "concat",
            Tensor::from_parts(shape, data),
            xs,
            Box::new(move |a| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&a.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| a.grad[off..off + n].to_vec());
                        off += n;
                        g
                    })
                    .collect()
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let n = self.value(x).numel();
        self.custom_op("sum", Tensor::scalar(s), &[x], Box::new(move |a| vec![Some(vec![a.grad[0]; n])]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n.max(1) as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!("sum_axis {axis} of {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.custom_op(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |a| {
                let mut d = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        d[base..base + inner].copy_from_slice(&a.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| NumericsError::Shape(format!("mean_axis {axis} of {:?}", self.shape(x))))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / extent.max(1) as f64))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. Entries with `mask[i] == false` are excluded and
    /// produce 0; every slice must keep at least one entry.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!("softmax axis {axis} of {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(NumericsError::DegenerateSoftmax);
        }
        if let Some(m) = mask {
            if m.len() != numel(&shape) {
                return Err(NumericsError::Shape("softmax mask size".into()));
            }
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for e in 0..extent {
                    if keep(at(e)) {
                        mx = mx.max(src[at(e)]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(NumericsError::DegenerateSoftmax);
                }
                let mut z = 0.0;
                for e in 0..extent {
                    if keep(at(e)) {
                        let v = (src[at(e)] - mx).exp();
                        out[at(e)] = v;
                        z += v;
                    }
                }
                for e in 0..extent {
                    out[at(e)] /= z;
                }
            }
        }
        Ok(self.custom_op(
            "softmax",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |a| {
                let y = a.output.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let s: f64 = (0..extent).map(|e| y[at(e)] * a.grad[at(e)]).sum();
                        for e in 0..extent {
                            d[at(e)] = y[at(e)] * (a.grad[at(e)] - s);
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits [R,K])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|&t| t >= shape[1]) {
            return Err(NumericsError::Shape(format!(
                "cross_entropy: logits {shape:?}, {} targets",
                targets.len()
            )));
        }
        let (r, k) = (shape[0], shape[1]);
        if k == 0 {
            return Err(NumericsError::DegenerateSoftmax);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * k];
        let mut nll = vec![0.0; r];
        for row in 0..r {
            let x = &src[row * k..(row + 1) * k];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..k {
                probs[row * k + c] = (x[c] - lse).exp();
            }
            nll[row] = lse - x[targets[row]];
        }
        let t = targets.to_vec();
        Ok(self.custom_op(
            "cross_entropy",
            Tensor::from_parts(vec![r], nll),
            &[logits],
            Box::new(move |a| {
                let mut d = probs.clone();
                for row in 0..r {
                    d[row * k + t[row]] -= 1.0;
                    d[row * k..(row + 1) * k].iter_mut().for_each(|v| *v *= a.grad[row]);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` [C].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumericsError::Shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.custom_op(
            "layer_norm",
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Box::new(move |a| {
                let gv = a.inputs[1].data();
                let mut dx = a.needs[0].then(|| vec![0.0; rows * c]);
                let mut dg = a.needs[1].then(|| vec![0.0; c]);
                let mut db = a.needs[2].then(|| vec![0.0; c]);
                for r in 0..rows {
                    let gy = &a.grad[r * c..(r + 1) * c];
                    let h = &xhat[r * c..(r + 1) * c];
                    if let Some(dg) = dg.as_mut() {
                        dg.iter_mut().zip(gy.iter().zip(h)).for_each(|(d, (g, h))| *d += g * h);
                    }
                    if let Some(db) = db.as_mut() {
                        db.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dh: Vec<f64> = gy.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// Cosine similarity of matching `[..., C]` vectors; zero-norm vectors give 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "cosine_similarity")?;
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| NumericsError::Shape("cosine of scalar".into()))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let rows = va.len() / c.max(1);
        let mut out = vec![0.0; rows];
        let mut norms = vec![(0.0, 0.0); rows];
        for r in 0..rows {
            let (x, y) = (&va[r * c..(r + 1) * c], &vb[r * c..(r + 1) * c]);
            let (na, nb) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            norms[r] = (na, nb);
            if na > 0.0 && nb > 0.0 {
                out[r] = dot(x, y) / (na * nb);
            }
        }
        Ok(self.custom_op(
            "cosine_similarity",
            Tensor::from_parts(shape[..shape.len() - 1].to_vec(), out),
            &[a, b],
            Box::new(move |ar| {
                let (va, vb) = (ar.inputs[0].data(), ar.inputs[1].data());
                let cos = ar.output.data();
                let mut da = ar.needs[0].then(|| vec![0.0; rows * c]);
                let mut db = ar.needs[1].then(|| vec![0.0; rows * c]);
                for r in 0..rows {
                    let (na, nb) = norms[r];
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let g = ar.grad[r];
                    let (x, y) = (&va[r * c..(r + 1) * c], &vb[r * c..(r + 1) * c]);
                    if let Some(da) = da.as_mut() {
                        for j in 0..c {
                            da[r * c + j] = g * (y[j] / (na * nb) - cos[r] * x[j] / (na * na));
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for j in 0..c {
                            db[r * c + j] = g * (x[j] / (na * nb) - cos[r] * y[j] / (nb * nb));
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }
}
