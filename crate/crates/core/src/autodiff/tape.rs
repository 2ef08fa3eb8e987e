use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, gemm, Layout};
use super::tensor::{numel, Tensor};
use super::TensorError;

/// Recorded operation. Inputs are node indices on the owning tape, so every
/// node's inputs precede it and a single reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Blend { z: usize, a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    AddScalar { x: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Softmax { x: usize, cols: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, dim: usize, normalized: Vec<f64>, inv_std: Vec<f64> },
    Concat { a: usize, b: usize, left: usize, right: usize },
    Slice { x: usize, start: usize, len: usize, cols: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Tile { x: usize, reps: usize },
    Select { x: usize, axis: usize, index: usize, in_shape: Vec<usize> },
    Sum { x: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "hadamard",
            Op::Blend { .. } => "blend",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Abs { .. } => "abs",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Tile { .. } => "tile",
            Op::Select { .. } => "select",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Concat { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Blend { z, a, b } => vec![z, a, b],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Abs { x }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Tile { x, .. }
            | Op::Select { x, .. }
            | Op::Sum { x } => vec![x],
        }
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    /// Shared so that reshapes reuse their input's buffer.
    pub(crate) value: Rc<Vec<f64>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient, only ever populated on trainable leaves.
    grad: Option<Vec<f64>>,
}

/// Dynamic reverse-mode tape.
///
/// Single-threaded by construction (interior mutability through `RefCell`);
/// use one tape per forward pass and per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    frozen: bool,
    fault: Cell<Option<&'static str>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            frozen: false,
            fault: Cell::new(None),
        }
    }

    /// A tape that evaluates values but records nothing differentiable.
    /// `backward` on it fails with [`TensorError::FrozenTape`].
    pub fn inference() -> Self {
        Tape {
            frozen: true,
            ..Self::new()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupts the backward rule of every op named `op` (see [`Op`] names
    /// such as `"sigmoid"` or `"matmul"`) by scaling its input gradients.
    /// Used to confirm that gradient checks catch a broken rule.
    pub fn inject_fault(&self, op: &'static str) {
        self.fault.set(Some(op));
    }

    /// Binds a tensor as a leaf. Trainable tensors (`requires_grad`) receive
    /// gradients on `backward`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad() && !self.frozen;
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Binds a non-trainable value.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_node(shape, t.into_data(), Op::Leaf, false)
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: impl Into<Rc<Vec<f64>>>, op: Op) -> Var<'_> {
        let value = value.into();
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = !self.frozen && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(shape, value, op, requires_grad)
    }

    fn push_node(&self, shape: Vec<usize>, value: impl Into<Rc<Vec<f64>>>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: value.into(),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> std::cell::Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Gradient accumulated on a trainable leaf, if any.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        assert!(std::ptr::eq(v.tape, self), "variable belongs to another tape");
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignTape);
        }
        if self.frozen {
            return Err(TensorError::FrozenTape);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        if !root.requires_grad {
            return Ok(());
        }

        let fault = self.fault.get();
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adjoint[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let factor = (fault == Some(nodes[id].op.name())).then_some(1.5);
            let mut sink = Adjoints {
                nodes: &nodes,
                slots: &mut adjoint,
                factor,
            };
            local_gradients(&nodes, id, g, &mut sink);
        }
        Ok(())
    }
}

/// Receives vector-Jacobian products and folds them into the adjoints.
struct Adjoints<'a> {
    nodes: &'a [Node],
    slots: &'a mut [Option<Vec<f64>>],
    /// Fault-injection multiplier applied to every contribution.
    factor: Option<f64>,
}

impl Adjoints<'_> {
    fn wants(&self, input: usize) -> bool {
        self.nodes[input].requires_grad
    }

    fn owned(&mut self, input: usize, mut c: Vec<f64>) {
        if !self.wants(input) {
            return;
        }
        if let Some(f) = self.factor {
            c.iter_mut().for_each(|x| *x *= f);
        }
        match &mut self.slots[input] {
            Some(buf) => buf.iter_mut().zip(&c).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(c),
        }
    }

    fn borrowed(&mut self, input: usize, c: &[f64]) {
        if !self.wants(input) {
            return;
        }
        if self.factor.is_some() {
            return self.owned(input, c.to_vec());
        }
        match &mut self.slots[input] {
            Some(buf) => buf.iter_mut().zip(c).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(c.to_vec()),
        }
    }

    /// `fill(buf, accumulate)` either adds into the existing adjoint or
    /// overwrites a fresh zeroed buffer of `len` entries.
    fn fill(&mut self, input: usize, len: usize, fill: impl FnOnce(&mut [f64], bool)) {
        if !self.wants(input) {
            return;
        }
        if self.factor.is_none() {
            if let Some(buf) = &mut self.slots[input] {
                fill(buf, true);
                return;
            }
        }
        let mut fresh = vec![0.0; len];
        fill(&mut fresh, false);
        self.owned(input, fresh);
    }
}

/// Vector-Jacobian products of node `id` given its output adjoint `g`.
fn local_gradients(nodes: &[Node], id: usize, g_owned: Vec<f64>, out: &mut Adjoints<'_>) {
    let g = g_owned.as_slice();
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.as_slice();
    let y = node.value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            out.fill(a, m * k, |da, acc| gemm(m, n, k, g, Layout::Normal, val(b), Layout::Transposed, da, acc));
            out.fill(b, k * n, |db, acc| gemm(k, m, n, val(a), Layout::Transposed, g, Layout::Normal, db, acc));
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            out.fill(a, batch * m * k, |da, acc| {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        Layout::Normal,
                        &bv[i * k * n..(i + 1) * k * n],
                        Layout::Transposed,
                        &mut da[i * m * k..(i + 1) * m * k],
                        acc,
                    );
                }
            });
            out.fill(b, batch * k * n, |db, acc| {
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        Layout::Transposed,
                        &g[i * m * n..(i + 1) * m * n],
                        Layout::Normal,
                        &mut db[i * k * n..(i + 1) * k * n],
                        acc,
                    );
                }
            });
        }
        &Op::Add { a, b } => {
            out.borrowed(b, g);
            out.owned(a, g_owned);
        }
        &Op::Sub { a, b } => {
            if out.wants(b) {
                out.owned(b, g.iter().map(|x| -x).collect());
            }
            out.owned(a, g_owned);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if out.wants(a) {
                out.owned(a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if out.wants(b) {
                out.owned(b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        &Op::Blend { z, a, b } => {
            let zv = val(z);
            if out.wants(z) {
                let d = g.iter().zip(val(a).iter().zip(val(b))).map(|(g, (a, b))| g * (a - b));
                out.owned(z, d.collect());
            }
            if out.wants(a) {
                out.owned(a, g.iter().zip(zv).map(|(g, z)| g * z).collect());
            }
            if out.wants(b) {
                out.owned(b, g.iter().zip(zv).map(|(g, z)| g * (1.0 - z)).collect());
            }
        }
        &Op::Scale { x, factor } => out.owned(x, g.iter().map(|g| g * factor).collect()),
        &Op::AddScalar { x } => out.owned(x, g_owned),
        &Op::Relu { x } => out.owned(
            x,
            g.iter()
                .zip(val(x))
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        &Op::Tanh { x } => out.owned(x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
        &Op::Sigmoid { x } => out.owned(x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
        &Op::Abs { x } => out.owned(
            x,
            g.iter()
                .zip(val(x))
                .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -*g } else { 0.0 })
                .collect(),
        ),
        &Op::Softmax { x, cols } => {
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            out.owned(x, dx);
        }
        Op::LayerNorm { x, gain, bias, dim, normalized, inv_std } => {
            let (x, gain, bias, dim) = (*x, *gain, *bias, *dim);
            let gv = val(gain);
            let mut dx = vec![0.0; normalized.len()];
            let mut dgain = vec![0.0; dim];
            let mut dbias = vec![0.0; dim];
            let inv_d = 1.0 / dim as f64;
            for (row, ((dxr, xh), gr)) in dx
                .chunks_mut(dim)
                .zip(normalized.chunks(dim))
                .zip(g.chunks(dim))
                .enumerate()
            {
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..dim {
                    dgain[j] += gr[j] * xh[j];
                    dbias[j] += gr[j];
                    let dxh = gr[j] * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                }
                mean_dxh *= inv_d;
                mean_dxh_xh *= inv_d;
                let s = inv_std[row];
                for j in 0..dim {
                    let dxh = gr[j] * gv[j];
                    dxr[j] = s * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            out.owned(x, dx);
            out.owned(gain, dgain);
            out.owned(bias, dbias);
        }
        &Op::Concat { a, b, left, right } => {
            let cols = left + right;
            let rows = g.len() / cols;
            let mut da = Vec::with_capacity(rows * left);
            let mut db = Vec::with_capacity(rows * right);
            for r in g.chunks(cols) {
                da.extend_from_slice(&r[..left]);
                db.extend_from_slice(&r[left..]);
            }
            out.owned(a, da);
            out.owned(b, db);
        }
        &Op::Slice { x, start, len, cols } => {
            let rows = g.len() / len;
            out.fill(x, rows * cols, |dx, acc| {
                for (dr, gr) in dx.chunks_mut(cols).zip(g.chunks(len)) {
                    let dst = &mut dr[start..start + len];
                    if acc {
                        dst.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    } else {
                        dst.copy_from_slice(gr);
                    }
                }
            });
        }
        &Op::Reshape { x } => out.owned(x, g_owned),
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            out.owned(*x, kernels::permute(g, &node.shape, &inv));
        }
        &Op::Tile { x, reps } => {
            let len = g.len() / reps;
            out.fill(x, len, |dx, _| {
                for chunk in g.chunks(len) {
                    dx.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                }
            });
        }
        Op::Select { x, axis, index, in_shape } => {
            let outer: usize = in_shape[..*axis].iter().product();
            let extent = in_shape[*axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            out.fill(*x, outer * extent * inner, |dx, _| {
                for o in 0..outer {
                    let dst = (o * extent + index) * inner;
                    dx[dst..dst + inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, g)| *d += g);
                }
            });
        }
        &Op::Sum { x } => out.owned(x, vec![g[0]; nodes[x].value.len()]),
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on a variable with {} elements", v.len());
        v[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }
}
