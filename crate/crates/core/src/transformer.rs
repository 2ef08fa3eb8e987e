//! Temporal transformer branch: per-node self-attention over the input
//! steps.
//!
//! Sequences are batched as `[S × T × d_model]` with `S = N·B`, node-major.
//! Only the last step feeds the output projection, so the final block
//! evaluates its query, feed-forward and normalization rows for that step
//! alone; keys and values still cover the whole window.

use crate::autodiff::{Tensor, TensorError, Var};
use crate::recurrent::Projection;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fixed sinusoidal table `[steps × d_model]`: even columns `sin(t/10000^{2i/d})`,
/// odd columns the matching cosine.
pub fn positional_encoding(steps: usize, d_model: usize) -> Result<Tensor, TensorError> {
    if steps == 0 || d_model == 0 || d_model % 2 != 0 {
        return Err(TensorError::Precondition(format!(
            "positional encoding needs steps ≥ 1 and an even d_model, got {steps} and {d_model}"
        )));
    }
    Ok(Tensor::from_fn(&[steps, d_model], |k| {
        let (t, j) = (k / d_model, k % d_model);
        let pair = (j / 2 * 2) as f64;
        let angle = t as f64 / 10000f64.powf(pair / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

fn transpose_last<'t>(k: Var<'t>) -> Result<Var<'t>, TensorError> {
    match k.shape().len() {
        2 => k.transpose(),
        3 => k.permute(&[0, 2, 1]),
        _ => Err(TensorError::Precondition(format!(
            "attention operands must be rank 2 or 3, got {:?}",
            k.shape()
        ))),
    }
}

fn product<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
    if a.shape().len() == 2 {
        a.matmul(b)
    } else {
        a.bmm(b)
    }
}

/// `softmax(q·kᵀ/√d_k)` for `[T_q × d_k]` operands or batches of them.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>, TensorError> {
    let dk = *k.shape().last().expect("non-scalar keys");
    if q.shape().len() != k.shape().len() || q.shape().last() != Some(&dk) {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(product(q, transpose_last(k)?)?.scale(1.0 / (dk as f64).sqrt()).softmax())
}

/// `softmax(q·kᵀ/√d_k)·v`.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>, TensorError> {
    let (ks, vs) = (k.shape(), v.shape());
    if ks.len() != vs.len() || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: ks,
            right: vs,
        });
    }
    product(attention_weights(q, k)?, v)
}

#[derive(Clone, Copy)]
pub struct AttentionProjections<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
}

fn split_heads<'t>(x: Var<'t>, w: Var<'t>, heads: usize) -> Result<Var<'t>, TensorError> {
    let shape = x.shape();
    let (s, t, dm) = (shape[0], shape[1], shape[2]);
    let dk = dm / heads;
    x.reshape(&[s * t, dm])?
        .matmul(w)?
        .reshape(&[s, t, heads, dk])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[s * heads, t, dk])
}

/// Multi-head attention of `queries [S × T_q × d]` over `context [S × T × d]`.
pub fn multi_head_attention<'t>(
    queries: Var<'t>,
    context: Var<'t>,
    p: &AttentionProjections<'t>,
    heads: usize,
) -> Result<Var<'t>, TensorError> {
    let (qs, cs) = (queries.shape(), context.shape());
    if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            left: qs,
            right: cs,
        });
    }
    let (s, tq, dm) = (qs[0], qs[1], qs[2]);
    if heads == 0 || dm % heads != 0 {
        return Err(TensorError::Precondition(format!(
            "d_model {dm} is not divisible by {heads} heads"
        )));
    }
    let q = split_heads(queries, p.w_q, heads)?;
    let k = split_heads(context, p.w_k, heads)?;
    let v = split_heads(context, p.w_v, heads)?;
    let merged = scaled_dot_attention(q, k, v)?
        .reshape(&[s, heads, tq, dm / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[s * tq, dm])?;
    merged.matmul(p.w_o)?.reshape(&[s, tq, dm])
}

#[derive(Clone, Copy)]
pub struct LayerNormParams<'t> {
    pub gain: Var<'t>,
    pub bias: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct LttlBlock<'t> {
    pub attention: AttentionProjections<'t>,
    pub norm1: LayerNormParams<'t>,
    pub ffn_in: Projection<'t>,
    pub ffn_out: Projection<'t>,
    pub norm2: LayerNormParams<'t>,
}

/// Post-norm encoder block on `x [S × T × d]`. With `last_only` the output is
/// `[S × 1 × d]`, equal to the last row of the full output.
pub fn lttl_block<'t>(
    x: Var<'t>,
    block: &LttlBlock<'t>,
    heads: usize,
    last_only: bool,
) -> Result<Var<'t>, TensorError> {
    let shape = x.shape();
    let (s, t, dm) = (shape[0], shape[1], shape[2]);
    let queries = if last_only {
        x.select(1, t - 1)?.reshape(&[s, 1, dm])?
    } else {
        x
    };
    let tq = queries.shape()[1];
    let attended = multi_head_attention(queries, x, &block.attention, heads)?;
    let y = queries
        .add(attended)?
        .layer_norm(block.norm1.gain, block.norm1.bias, LAYER_NORM_EPS)?;
    let rows = y.reshape(&[s * tq, dm])?;
    let ffn = block.ffn_out.apply(block.ffn_in.apply(rows)?.relu())?;
    rows.add(ffn)?
        .layer_norm(block.norm2.gain, block.norm2.bias, LAYER_NORM_EPS)?
        .reshape(&[s, tq, dm])
}

/// Bound parameters of the temporal branch.
pub struct Lttl<'t> {
    pub embed: Projection<'t>,
    pub blocks: Vec<LttlBlock<'t>>,
    pub projection: Projection<'t>,
    pub heads: usize,
    /// `[T_max × d_model]`, normally [`positional_encoding`].
    pub encoding: Tensor,
}

impl<'t> Lttl<'t> {
    /// `x [N × T × B × C]` to `[N × B × out]`.
    pub fn forward_batch(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = x.shape();
        let (n, steps, batch, c) = match shape[..] {
            [n, t, b, c] => (n, t, b, c),
            _ => {
                return Err(TensorError::Precondition(format!(
                    "temporal input must be [N, T, B, C], got {shape:?}"
                )))
            }
        };
        let (t_max, dm) = (self.encoding.shape()[0], self.encoding.shape()[1]);
        if steps > t_max {
            return Err(TensorError::Precondition(format!(
                "{steps} input steps exceed the positional table of {t_max}"
            )));
        }
        let s = n * batch;
        let rows = x.permute(&[0, 2, 1, 3])?.reshape(&[s * steps, c])?;
        let embedded = self.embed.apply(rows)?.reshape(&[s, steps, dm])?;
        let table = Tensor::new(vec![steps, dm], self.encoding.data()[..steps * dm].to_vec())?;
        let table = x.tape().constant(table).tile(s)?;
        let mut h = embedded.add(table)?;
        let last = self.blocks.len().saturating_sub(1);
        for (i, block) in self.blocks.iter().enumerate() {
            h = lttl_block(h, block, self.heads, i == last)?;
        }
        let t_out = h.shape()[1];
        let final_step = if t_out == 1 { h.reshape(&[s, dm])? } else { h.select(1, t_out - 1)? };
        let out = self.projection.apply(final_step)?;
        let width = out.shape()[1];
        out.reshape(&[n, batch, width])
    }
}

/// Single-window form: `x_seq [T × N × C]` to `y_t [N × out]`.
pub fn lttl_forward<'t>(x_seq: Var<'t>, lttl: &Lttl<'t>) -> Result<Var<'t>, TensorError> {
    let shape = x_seq.shape();
    let (steps, n, c) = match shape[..] {
        [t, n, c] => (t, n, c),
        _ => {
            return Err(TensorError::Precondition(format!(
                "sequence must be [T, N, C], got {shape:?}"
            )))
        }
    };
    let x = x_seq.permute(&[1, 0, 2])?.reshape(&[n, steps, 1, c])?;
    let y = lttl.forward_batch(x)?;
    let width = y.shape()[2];
    y.reshape(&[n, width])
}
