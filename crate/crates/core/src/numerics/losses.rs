//! Differentiable loss kernels. Targets are plain data, never graph nodes.

use super::graph::{Graph, Var};
use super::kernels::BoxCorners;
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Smoothing constant of the dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Generalized IoU of two boxes; `1 - giou` is in `[0, 2]`.
pub fn giou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    GiouParts::new(a, b).giou()
}

/// Plain IoU of two boxes.
pub fn box_iou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let p = GiouParts::new(a, b);
    if p.union > 0.0 {
        p.inter / p.union
    } else {
        0.0
    }
}

struct GiouParts {
    iw: f64,
    ih: f64,
    inter: f64,
    union: f64,
    ew: f64,
    eh: f64,
    enclose: f64,
}

impl GiouParts {
    fn new(a: &BoxCorners, b: &BoxCorners) -> Self {
        let area = |x: &BoxCorners| (x[2] - x[0]) * (x[3] - x[1]);
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = area(a) + area(b) - inter;
        let ew = a[2].max(b[2]) - a[0].min(b[0]);
        let eh = a[3].max(b[3]) - a[1].min(b[1]);
        Self { iw, ih, inter, union, ew, eh, enclose: ew * eh }
    }

    fn giou(&self) -> f64 {
        if self.union <= 0.0 || self.enclose <= 0.0 {
            return 0.0;
        }
        self.inter / self.union - (self.enclose - self.union) / self.enclose
    }
}

fn as_box(s: &[f64]) -> BoxCorners {
    [s[0], s[1], s[2], s[3]]
}

impl Graph {
    /// Elementwise binary cross-entropy between probabilities `p` and a target
    /// of the same shape.
    pub fn binary_cross_entropy(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(NumericsError::Shape(format!(
                "bce: {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        let t = target.data().to_vec();
        let value = Tensor::from_parts(
            self.shape(p).to_vec(),
            self.value(p)
                .data()
                .iter()
                .zip(&t)
                .map(|(&p, &t)| {
                    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .collect(),
        );
        Ok(self.custom_op(
            "binary_cross_entropy",
            value,
            &[p],
            Box::new(move |a| {
                let d = a
                    .grad
                    .iter()
                    .zip(a.inputs[0].data())
                    .zip(&t)
                    .map(|((g, &p), &t)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            g * (-t / p + (1.0 - t) / (1.0 - p))
                        }
                    })
                    .collect();
                vec![Some(d)]
            }),
        ))
    }

    /// Per-row dice loss `1 - (2Σpt + 1) / (Σp + Σt + 1)` of `p [R, P]` against `target [R, P]`.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 2 || shape != target.shape() {
            return Err(NumericsError::Shape(format!("dice: {shape:?} vs {:?}", target.shape())));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let t = target.data().to_vec();
        let pv = self.value(p).data();
        let mut sums = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (pr, tr) = (&pv[r * cols..(r + 1) * cols], &t[r * cols..(r + 1) * cols]);
            let inter: f64 = pr.iter().zip(tr).map(|(a, b)| a * b).sum();
            let denom = pr.iter().sum::<f64>() + tr.iter().sum::<f64>() + DICE_EPS;
            let num = 2.0 * inter + DICE_EPS;
            sums.push((num, denom));
            out.push(1.0 - num / denom);
        }
        Ok(self.custom_op(
            "dice_loss",
            Tensor::from_parts(vec![rows], out),
            &[p],
            Box::new(move |a| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (num, den) = sums[r];
                    let g = a.grad[r];
                    for c in 0..cols {
                        // d/dp of -(num/den) = -(2t·den - num) / den²
                        d[r * cols + c] = -g * (2.0 * t[r * cols + c] * den - num) / (den * den);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Per-row `1 - GIoU` between predicted `boxes [R,4]` and fixed targets.
    pub fn giou_loss(&mut self, boxes: Var, targets: &[BoxCorners]) -> Result<Var> {
        if self.shape(boxes) != [targets.len(), 4] {
            return Err(NumericsError::Shape(format!(
                "giou_loss: {:?} vs {} targets",
                self.shape(boxes),
                targets.len()
            )));
        }
        let bv = self.value(boxes).data();
        let out = targets
            .iter()
            .enumerate()
            .map(|(r, t)| 1.0 - giou(&as_box(&bv[r * 4..r * 4 + 4]), t))
            .collect();
        let targets = targets.to_vec();
        Ok(self.custom_op(
            "giou_loss",
            Tensor::from_parts(vec![targets.len()], out),
            &[boxes],
            Box::new(move |a| {
                let bv = a.inputs[0].data();
                let mut d = vec![0.0; bv.len()];
                for (r, t) in targets.iter().enumerate() {
                    let b = as_box(&bv[r * 4..r * 4 + 4]);
                    let p = GiouParts::new(&b, t);
                    if p.union <= 0.0 || p.enclose <= 0.0 {
                        continue;
                    }
                    // loss = 2 - inter/union - union/enclose, union = area_b + area_t - inter
                    let (u, e, i) = (p.union, p.enclose, p.inter);
                    let g_inter = -(1.0 / u + i / (u * u)) + 1.0 / e;
                    let g_area = i / (u * u) - 1.0 / e;
                    let g_encl = u / (e * e);
                    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
                    let mut gb = [
                        -g_area * bh,
                        -g_area * bw,
                        g_area * bh,
                        g_area * bw,
                    ];
                    if p.iw > 0.0 && p.ih > 0.0 {
                        if b[0] > t[0] {
                            gb[0] -= g_inter * p.ih;
                        }
                        if b[2] < t[2] {
                            gb[2] += g_inter * p.ih;
                        }
                        if b[1] > t[1] {
                            gb[1] -= g_inter * p.iw;
                        }
                        if b[3] < t[3] {
                            gb[3] += g_inter * p.iw;
                        }
                    }
                    if b[0] < t[0] {
                        gb[0] -= g_encl * p.eh;
                    }
                    if b[2] > t[2] {
                        gb[2] += g_encl * p.eh;
                    }
                    if b[1] < t[1] {
                        gb[1] -= g_encl * p.ew;
                    }
                    if b[3] > t[3] {
                        gb[3] += g_encl * p.ew;
                    }
                    for k in 0..4 {
                        d[r * 4 + k] = a.grad[r] * gb[k];
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_values() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(giou(&a, &a), 1.0);
        // far-apart disjoint boxes approach -1
        let far = [1000.0, 1000.0, 1002.0, 1002.0];
        assert!(giou(&a, &far) < -0.99);
        assert_eq!(box_iou(&a, &[1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0);
    }

    #[test]
    fn dice_conventions() {
        let mut g = Graph::new();
        let empty = g.constant(Tensor::zeros(&[1, 9]));
        let d = g.dice_loss(empty, &Tensor::zeros(&[1, 9])).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        let full = g.constant(Tensor::full(&[1, 400], 1.0));
        let d = g.dice_loss(full, &Tensor::full(&[1, 400], 1.0)).unwrap();
        assert!(g.value(d).item().abs() < 1e-12);
        let mut left = Tensor::zeros(&[1, 400]);
        left.data_mut()[..200].iter_mut().for_each(|v| *v = 1.0);
        let mut right = Tensor::zeros(&[1, 400]);
        right.data_mut()[200..].iter_mut().for_each(|v| *v = 1.0);
        let l = g.constant(left);
        let d = g.dice_loss(l, &right).unwrap();
        assert!((g.value(d).item() - (1.0 - 1.0 / 401.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_half_probability_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[3, 3], 0.5));
        let l = g.binary_cross_entropy(p, &Tensor::zeros(&[3, 3])).unwrap();
        for v in g.value(l).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }
}
