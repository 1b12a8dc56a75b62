//! Scaled dot-product multi-head attention built from graph ops.

use super::graph::{Graph, Var};
use super::{NumericsError, Result};

/// Projection weights of one attention block; every `w*` is `[C,C]`, every `b*` is `[C]`.
///
/// The key bias is optional: it adds the same amount to every score of a
/// query row, which softmax cancels, so it never receives a gradient.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn project(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention over sequences `[B,L,C]`; queries come from `query_in`,
/// keys from `key_in` and values from `value_in`. No residual or normalization.
pub fn multi_head_attention(
    g: &mut Graph,
    query_in: Var,
    key_in: Var,
    value_in: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let &[batch, len, c] = g.shape(query_in) else {
        return Err(NumericsError::Shape(format!("attention input {:?}", g.shape(query_in))));
    };
    if g.shape(key_in) != [batch, len, c] || g.shape(value_in) != [batch, len, c] {
        return Err(NumericsError::Shape("attention query/key/value shapes differ".into()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(NumericsError::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    if len == 0 {
        return Err(NumericsError::Shape("attention over an empty sequence".into()));
    }
    let d = c / heads;
    let split = |g: &mut Graph, x: Var, wt: Var, bias: Option<Var>| -> Result<Var> {
        let flat = g.reshape(x, &[batch * len, c])?;
        let p = project(g, flat, wt, bias)?;
        let p = g.reshape(p, &[batch, len, heads, d])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, &[batch * heads, len, d])
    };
    let q = split(g, query_in, w.wq, Some(w.bq))?;
    let k = split(g, key_in, w.wk, w.bk)?;
    let v = split(g, value_in, w.wv, Some(w.bv))?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.mul_scalar(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.reshape(ctx, &[batch, heads, len, d])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * len, c])?;
    let out = project(g, ctx, w.wo, Some(w.bo))?;
    g.reshape(out, &[batch, len, c])
}

/// Self-attention over `[L,C]` or `[B,L,C]`.
pub fn multi_head_self_attention(g: &mut Graph, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match *shape.as_slice() {
        [l, c] => {
            let xb = g.reshape(x, &[1, l, c])?;
            let y = multi_head_attention(g, xb, xb, xb, w, heads)?;
            g.reshape(y, &[l, c])
        }
        [_, _, _] => multi_head_attention(g, x, x, x, w, heads),
        _ => Err(NumericsError::Shape(format!("self-attention input {shape:?}"))),
    }
}
