use std::rc::Rc;

use super::kernels::{self, gemm, Layout};
use super::tape::{Op, Var};
use super::tensor::numel;
use super::TensorError;

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect::<Vec<f64>>())
        };
        self.tape.push(shape, value, op(self.id))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(mismatch(name, &a.shape, &b.shape));
            }
            let v: Vec<f64> = a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        Ok(self.tape.push(shape, value, op(self.id, other.id)))
    }

    /// Matrix product of `[m × k]` and `[k × n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (m, k, n, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a.value, Layout::Normal, &b.value, Layout::Normal, &mut c, false);
            (m, k, n, c)
        };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
        };
        Ok(self.tape.push(vec![m, n], value, op))
    }

    /// Batched matrix product of `[b × m × k]` and `[b × k × n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (batch, m, k, n, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 3
                || b.shape.len() != 3
                || a.shape[0] != b.shape[0]
                || a.shape[2] != b.shape[1]
            {
                return Err(mismatch("bmm", &a.shape, &b.shape));
            }
            let (batch, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut c = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.value[i * m * k..(i + 1) * m * k],
                    Layout::Normal,
                    &b.value[i * k * n..(i + 1) * k * n],
                    Layout::Normal,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            (batch, m, k, n, c)
        };
        let op = Op::BatchMatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
        };
        Ok(self.tape.push(vec![batch, m, n], value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "hadamard", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    /// `self ⊙ a + (1 − self) ⊙ b`, elementwise.
    pub fn blend(self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&a);
        self.same_tape(&b);
        let value = {
            let nodes = self.tape.nodes();
            let (z, av, bv) = (&nodes[self.id], &nodes[a.id], &nodes[b.id]);
            if z.shape != av.shape || z.shape != bv.shape {
                let other = if z.shape != av.shape { &av.shape } else { &bv.shape };
                return Err(mismatch("blend", &z.shape, other));
            }
            let v: Vec<f64> = z
                .value
                .iter()
                .zip(av.value.iter().zip(bv.value.iter()))
                .map(|(z, (a, b))| z * a + (1.0 - z) * b)
                .collect();
            v
        };
        let shape = self.shape();
        Ok(self.tape.push(shape, value, Op::Blend { z: self.id, a: a.id, b: b.id }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(|x| Op::Scale { x, factor }, |v| v * factor)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| Op::AddScalar { x }, |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(|x| Op::Tanh { x }, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| Op::Sigmoid { x }, sigmoid)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(|x| Op::Abs { x }, f64::abs)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Var<'t> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let cols = *n.shape.last().expect("softmax of a rank-0 value");
            let mut out = n.value.to_vec();
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
            (n.shape.clone(), out, cols)
        };
        self.tape.push(shape, value, Op::Softmax { x: self.id, cols })
    }

    /// Normalizes over the last axis then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        if !(eps > 0.0) {
            return Err(TensorError::Precondition(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (shape, value, normalized, inv_std, dim) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let dim = *x.shape.last().expect("layer_norm of a rank-0 value");
            if g.shape != [dim] {
                return Err(mismatch("layer_norm", &x.shape, &g.shape));
            }
            if b.shape != [dim] {
                return Err(mismatch("layer_norm", &x.shape, &b.shape));
            }
            let rows = x.value.len() / dim;
            let mut normalized = Vec::with_capacity(x.value.len());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks(dim) {
                let mean = row.iter().sum::<f64>() / dim as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std.push(s);
                for j in 0..dim {
                    let xh = (row[j] - mean) * s;
                    normalized.push(xh);
                    out.push(g.value[j] * xh + b.value[j]);
                }
            }
            (x.shape.clone(), out, normalized, inv_std, dim)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            dim,
            normalized,
            inv_std,
        };
        Ok(self.tape.push(shape, value, op))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (shape, value, left, right) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ra = a.shape.len();
            if ra == 0 || ra != b.shape.len() || a.shape[..ra - 1] != b.shape[..ra - 1] {
                return Err(mismatch("concat", &a.shape, &b.shape));
            }
            let (left, right) = (a.shape[ra - 1], b.shape[ra - 1]);
            let mut out = Vec::with_capacity(a.value.len() + b.value.len());
            for (ra, rb) in a.value.chunks(left).zip(b.value.chunks(right)) {
                out.extend_from_slice(ra);
                out.extend_from_slice(rb);
            }
            let mut shape = a.shape.clone();
            shape[ra - 1] = left + right;
            (shape, out, left, right)
        };
        let op = Op::Concat {
            a: self.id,
            b: other.id,
            left,
            right,
        };
        Ok(self.tape.push(shape, value, op))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap_or(&0);
            if len == 0 || start + len > cols {
                return Err(TensorError::Precondition(format!(
                    "slice {start}..{} out of range for last axis of {:?}",
                    start + len,
                    x.shape
                )));
            }
            let mut out = Vec::with_capacity(x.value.len() / cols * len);
            for row in x.value.chunks(cols) {
                out.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = len;
            (shape, out, cols)
        };
        let op = Op::Slice {
            x: self.id,
            start,
            len,
            cols,
        };
        Ok(self.tape.push(shape, value, op))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            if numel(shape) != x.value.len() || shape.iter().any(|&d| d == 0) {
                return Err(mismatch("reshape", &x.shape, shape));
            }
            Rc::clone(&x.value)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape { x: self.id }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>, TensorError> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let mut seen = vec![false; x.shape.len()];
            let valid = perm.len() == x.shape.len()
                && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::Precondition(format!(
                    "permutation {perm:?} invalid for shape {:?}",
                    x.shape
                )));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            (shape, kernels::permute(&x.value, &x.shape, perm))
        };
        let op = Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        };
        Ok(self.tape.push(shape, value, op))
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        if self.shape().len() != 2 {
            return Err(TensorError::Precondition(format!(
                "transpose expects a matrix, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Stacks `reps` copies along a new leading axis.
    pub fn tile(self, reps: usize) -> Result<Var<'t>, TensorError> {
        if reps == 0 {
            return Err(TensorError::Precondition("tile count must be positive".into()));
        }
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let mut shape = vec![reps];
            shape.extend_from_slice(&x.shape);
            (shape, x.value.repeat(reps))
        };
        Ok(self.tape.push(shape, value, Op::Tile { x: self.id, reps }))
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t>, TensorError> {
        let (shape, value, in_shape) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            if axis >= x.shape.len() || index >= x.shape[axis] || x.shape.len() < 2 {
                return Err(TensorError::Precondition(format!(
                    "select index {index} on axis {axis} invalid for shape {:?}",
                    x.shape
                )));
            }
            let outer: usize = x.shape[..axis].iter().product();
            let extent = x.shape[axis];
            let inner: usize = x.shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let src = (o * extent + index) * inner;
                out.extend_from_slice(&x.value[src..src + inner]);
            }
            let mut shape = x.shape.clone();
            shape.remove(axis);
            (shape, out, x.shape.clone())
        };
        let op = Op::Select {
            x: self.id,
            axis,
            index,
            in_shape,
        };
        Ok(self.tape.push(shape, value, op))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let total = self.tape.nodes()[self.id].value.iter().sum();
        self.tape.push(vec![1], vec![total], Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
