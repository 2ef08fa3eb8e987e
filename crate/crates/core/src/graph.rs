//! Adaptive adjacency from node embeddings and node-adaptive graph
//! convolution.
//!
//! Batched activations use a node-major `[N × B × C]` layout so that
//! neighbourhood aggregation is one `[N × N] · [N × (B·C)]` product and the
//! per-node weights apply as a batched product over the node axis.

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// `softmax(relu(E_A · E_Aᵀ))`, row-stochastic `[N × N]`.
pub fn adaptive_adjacency<'t>(e_a: Var<'t>) -> Result<Var<'t>, TensorError> {
    Ok(e_a.matmul(e_a.transpose()?)?.relu().softmax())
}

/// [`adaptive_adjacency`] evaluated without recording gradients.
pub fn compute_adaptive_adjacency(e_a: &Tensor) -> Result<Tensor, TensorError> {
    let tape = Tape::inference();
    Ok(adaptive_adjacency(tape.leaf(e_a))?.to_tensor())
}

/// `I + adj`.
pub fn with_self_loops<'t>(adj: Var<'t>) -> Result<Var<'t>, TensorError> {
    let n = adj.shape()[0];
    adj.tape().constant(Tensor::identity(n)).add(adj)
}

/// Static support `I + D^{-1/2} A D^{-1/2}` for the path graph that links
/// consecutive stations in file order. Isolated nodes contribute only the
/// self-loop.
pub fn line_graph_support(n: usize) -> Tensor {
    let degree = |i: usize| (i > 0) as usize + (i + 1 < n) as usize;
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if i == j {
            1.0
        } else if i.abs_diff(j) == 1 {
            1.0 / ((degree(i) * degree(j)) as f64).sqrt()
        } else {
            0.0
        }
    })
}

/// `Θ = E_G · W_G`: per-node weights `[N × C × F]` from `e_g [N × d]` and
/// the pool `w_g [d × C × F]`.
pub fn materialize_theta<'t>(e_g: Var<'t>, w_g: Var<'t>) -> Result<Var<'t>, TensorError> {
    let (n, d) = matrix_dims(e_g)?;
    let pool = w_g.shape();
    if pool.len() != 3 || pool[0] != d {
        return Err(TensorError::ShapeMismatch {
            op: "materialize_theta",
            left: e_g.shape(),
            right: pool,
        });
    }
    let (c, f) = (pool[1], pool[2]);
    e_g.matmul(w_g.reshape(&[d, c * f])?)?.reshape(&[n, c, f])
}

/// `E_G · b_G`, per-node biases `[N × F]`.
pub fn node_bias<'t>(e_g: Var<'t>, b_g: Var<'t>) -> Result<Var<'t>, TensorError> {
    e_g.matmul(b_g)
}

/// Node-adaptive graph convolution of one snapshot `x [N × C]`:
/// `Z[i] = Σ_j S[i,j]·x[j]·Θ[i] + (E_G·b_G)[i]` with support `S`.
pub fn napl_gcn<'t>(
    x: Var<'t>,
    support: Var<'t>,
    e_g: Var<'t>,
    w_g: Var<'t>,
    b_g: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let (n, c) = matrix_dims(x)?;
    let conv = GraphConv::napl(e_g, w_g, b_g, 1)?;
    if conv.in_features() != c {
        return Err(TensorError::ShapeMismatch {
            op: "napl_gcn",
            left: x.shape(),
            right: w_g.shape(),
        });
    }
    let agg = aggregate(support, x.reshape(&[n, 1, c])?)?;
    conv.apply(agg)?.reshape(&[n, conv.out_features()])
}

/// `S · x` for node-major `x [N × B × C]`.
pub fn aggregate<'t>(support: Var<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::Precondition(format!(
            "aggregate expects [N, B, C], got {shape:?}"
        )));
    }
    let flat = x.reshape(&[shape[0], shape[1] * shape[2]])?;
    support.matmul(flat)?.reshape(&shape)
}

fn matrix_dims(v: Var<'_>) -> Result<(usize, usize), TensorError> {
    match v.shape()[..] {
        [r, c] => Ok((r, c)),
        ref other => Err(TensorError::Precondition(format!("expected a matrix, got {other:?}"))),
    }
}

/// Per-node `[N, B, F]` copy of a `[N, F]` value.
pub(crate) fn spread_over_batch<'t>(v: Var<'t>, batch: usize) -> Result<Var<'t>, TensorError> {
    v.tile(batch)?.permute(&[1, 0, 2])
}

/// Feature transform applied after aggregation, bound for a fixed batch size.
#[derive(Clone, Copy)]
pub enum GraphConv<'t> {
    /// Node-specific `theta [N × C × F]` and bias `[N × B × F]`.
    Napl { theta: Var<'t>, bias: Var<'t> },
    /// One `w [C × F]` for all nodes, bias pre-tiled to `[N·B × F]`.
    Shared { w: Var<'t>, bias: Var<'t>, nodes: usize },
}

impl<'t> GraphConv<'t> {
    pub fn napl(e_g: Var<'t>, w_g: Var<'t>, b_g: Var<'t>, batch: usize) -> Result<Self, TensorError> {
        let theta = materialize_theta(e_g, w_g)?;
        let bias = spread_over_batch(node_bias(e_g, b_g)?, batch)?;
        Ok(GraphConv::Napl { theta, bias })
    }

    pub fn shared(w: Var<'t>, b: Var<'t>, nodes: usize, batch: usize) -> Result<Self, TensorError> {
        let bias = b.tile(nodes * batch)?;
        Ok(GraphConv::Shared { w, bias, nodes })
    }

    pub fn in_features(&self) -> usize {
        match self {
            GraphConv::Napl { theta, .. } => theta.shape()[1],
            GraphConv::Shared { w, .. } => w.shape()[0],
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            GraphConv::Napl { theta, .. } => theta.shape()[2],
            GraphConv::Shared { w, .. } => w.shape()[1],
        }
    }

    /// Transforms already-aggregated features `[N × B × C]` to `[N × B × F]`.
    pub fn apply(&self, agg: Var<'t>) -> Result<Var<'t>, TensorError> {
        match *self {
            GraphConv::Napl { theta, bias } => agg.bmm(theta)?.add(bias),
            GraphConv::Shared { w, bias, nodes } => {
                let shape = agg.shape();
                let rows = agg.reshape(&[nodes * shape[1], shape[2]])?;
                let out = rows.matmul(w)?.add(bias)?;
                out.reshape(&[nodes, shape[1], self.out_features()])
            }
        }
    }
}
