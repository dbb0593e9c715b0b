//! Reverse-mode differentiation on a flat operation tape.
//!
//! The op vocabulary is exactly what the model needs: dense matmul,
//! elementwise arithmetic and activations, axis reductions, row/range
//! slicing, concatenation, cosine similarity, sparsemax, and a couple of
//! guarded norms. All storage is `f64`; shapes are at most rank 2.
//!
//! A [`Tape`] is single-threaded and lives for one forward/backward pass.
//! [`TensorId`] handles are only valid on the tape that created them
//! (checked), and leaves snapshot their data at registration.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::sparsemax::{sparsemax, sparsemax_backward};

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(1);

/// Tensor shape; rank 2 is all the model needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    fn rows(&self) -> usize {
        match *self {
            Shape::Matrix(r, _) => r,
            _ => panic!("expected matrix, got {self:?}"),
        }
    }

    fn cols(&self) -> usize {
        match *self {
            Shape::Matrix(_, c) => c,
            _ => panic!("expected matrix, got {self:?}"),
        }
    }
}

/// Handle to a tensor node; valid only on the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId {
    tape: u32,
    index: u32,
}

struct Node {
    shape: Shape,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Index of the producing op, `None` for leaves.
    producer: Option<u32>,
}

enum Op {
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Transpose { x: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f64, out: TensorId },
    AddRowBroadcast { mat: TensorId, row: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    Ln { x: TensorId, out: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
    MeanAll { x: TensorId, out: TensorId },
    SumAxis { x: TensorId, axis: usize, out: TensorId },
    MeanAxis { x: TensorId, axis: usize, out: TensorId },
    Rows { x: TensorId, from: usize, out: TensorId },
    Slice { x: TensorId, from: usize, out: TensorId },
    Concat { parts: Vec<TensorId>, out: TensorId },
    StackRows { parts: Vec<TensorId>, out: TensorId },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    GatherRows { x: TensorId, indices: Vec<u32>, out: TensorId },
    AppendColConst { mat: TensorId, out: TensorId },
    RowMaskLerp { on: TensorId, off: TensorId, mask: Vec<f64>, out: TensorId },
    CosineRows { m: TensorId, v: TensorId, eps: f64, out: TensorId },
    Sparsemax { z: TensorId, out: TensorId },
    Norm2 { v: TensorId, eps: f64, out: TensorId },
    Dot { a: TensorId, b: TensorId, out: TensorId },
    OuterConst { coeffs: Vec<f64>, v: TensorId, out: TensorId },
    Reshape { x: TensorId, out: TensorId },
}

/// Records forward ops and replays them in reverse for gradients.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── node plumbing ───────────────────────────────────────────────

    fn push(&mut self, shape: Shape, values: Vec<f64>, producer: Option<u32>) -> TensorId {
        assert_eq!(shape.numel(), values.len(), "shape/value length mismatch");
        assert!(shape.numel() > 0, "empty tensors are not allowed");
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { shape, values, grad: None, producer });
        TensorId { tape: self.id, index }
    }

    fn node(&self, id: TensorId) -> &Node {
        assert_eq!(id.tape, self.id, "tensor used on a foreign tape");
        &self.nodes[id.index as usize]
    }

    /// Register a leaf tensor (parameter or constant input).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Shape) -> TensorId {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite values entering the tape"
        );
        self.push(shape, values, None)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(vec![value], Shape::Scalar)
    }

    pub fn zeros(&mut self, shape: Shape) -> TensorId {
        self.leaf(vec![0.0; shape.numel()], shape)
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    pub fn value(&self, id: TensorId) -> f64 {
        let node = self.node(id);
        assert_eq!(node.shape, Shape::Scalar, "value() on non-scalar");
        node.values[0]
    }

    /// Gradient accumulated by `backward`, if any flowed to this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<f64> {
        let node = self.node(id);
        node.grad.clone().unwrap_or_else(|| vec![0.0; node.shape.numel()])
    }

    /// Identity of the op that produced this tensor; `None` for leaves.
    pub fn producer(&self, id: TensorId) -> Option<u32> {
        self.node(id).producer
    }

    fn accumulate(&mut self, id: TensorId, grad: &[f64]) {
        let node = &mut self.nodes[id.index as usize];
        debug_assert_eq!(grad.len(), node.shape.numel());
        match &mut node.grad {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => node.grad = Some(grad.to_vec()),
        }
    }

    /// Accumulate a freshly computed gradient, moving it in when the
    /// slot is empty.
    fn accumulate_owned(&mut self, id: TensorId, grad: Vec<f64>) {
        let node = &mut self.nodes[id.index as usize];
        debug_assert_eq!(grad.len(), node.shape.numel());
        match &mut node.grad {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            None => node.grad = Some(grad),
        }
    }

    fn record(&mut self, shape: Shape, values: Vec<f64>, make: impl FnOnce(TensorId) -> Op) -> TensorId {
        let op_index = self.ops.len() as u32;
        let out = self.push(shape, values, Some(op_index));
        self.ops.push(make(out));
        out
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// `a[p×q] · b[q×r] -> [p×r]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (p, q) = (self.shape(a).rows(), self.shape(a).cols());
        let (q2, r) = (self.shape(b).rows(), self.shape(b).cols());
        assert_eq!(q, q2, "matmul inner dimensions {q} vs {q2}");
        let mut out = vec![0.0; p * r];
        matmul_kernel(self.values(a), self.values(b), p, q, r, &mut out);
        self.record(Shape::Matrix(p, r), out, |o| Op::MatMul { a, b, out: o })
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (r, c) = (self.shape(x).rows(), self.shape(x).cols());
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.record(Shape::Matrix(c, r), out, |o| Op::Transpose { x, out: o })
    }

    fn zip_same_shape(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> (Shape, Vec<f64>) {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "elementwise shape mismatch");
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (shape, out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (shape, out) = self.zip_same_shape(a, b, |x, y| x + y);
        self.record(shape, out, |o| Op::Add { a, b, out: o })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (shape, out) = self.zip_same_shape(a, b, |x, y| x - y);
        self.record(shape, out, |o| Op::Sub { a, b, out: o })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (shape, out) = self.zip_same_shape(a, b, |x, y| x * y);
        self.record(shape, out, |o| Op::Mul { a, b, out: o })
    }

    /// Multiply by a compile-time-constant scalar.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        assert!(c.is_finite(), "scale by non-finite constant");
        let shape = self.shape(x);
        let out = self.values(x).iter().map(|&v| v * c).collect();
        self.record(shape, out, |o| Op::Scale { x, c, out: o })
    }

    /// Add a length-`c` row vector to every row of an `[r×c]` matrix.
    pub fn add_row_broadcast(&mut self, mat: TensorId, row: TensorId) -> TensorId {
        let (r, c) = (self.shape(mat).rows(), self.shape(mat).cols());
        let row_shape = self.shape(row);
        assert_eq!(row_shape, Shape::Vector(c), "broadcast row must be Vector({c})");
        let rv = self.values(row).to_vec();
        let mut out = self.values(mat).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        self.record(Shape::Matrix(r, c), out, |o| Op::AddRowBroadcast { mat, row, out: o })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let out = self.values(x).iter().map(|&v| stable_sigmoid(v)).collect();
        self.record(shape, out, |o| Op::Sigmoid { x, out: o })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let out = self.values(x).iter().map(|&v| v.tanh()).collect();
        self.record(shape, out, |o| Op::Tanh { x, out: o })
    }

    /// Natural log; input must be strictly positive.
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        assert!(
            self.values(x).iter().all(|&v| v > 0.0),
            "ln requires strictly positive input"
        );
        let out = self.values(x).iter().map(|&v| v.ln()).collect();
        self.record(shape, out, |o| Op::Ln { x, out: o })
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        assert!(lo < hi);
        let shape = self.shape(x);
        let out = self.values(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        self.record(shape, out, |o| Op::Clamp { x, lo, hi, out: o })
    }

    /// Reduce to a scalar (`axis: None`) or along a matrix axis.
    pub fn sum(&mut self, x: TensorId, axis: Option<usize>) -> TensorId {
        match axis {
            None => {
                let total = self.values(x).iter().sum();
                self.record(Shape::Scalar, vec![total], |o| Op::SumAll { x, out: o })
            }
            Some(axis) => {
                let (values, shape) = self.axis_reduce(x, axis, false);
                self.record(shape, values, |o| Op::SumAxis { x, axis, out: o })
            }
        }
    }

    pub fn mean(&mut self, x: TensorId, axis: Option<usize>) -> TensorId {
        match axis {
            None => {
                let n = self.shape(x).numel() as f64;
                let total: f64 = self.values(x).iter().sum();
                self.record(Shape::Scalar, vec![total / n], |o| Op::MeanAll { x, out: o })
            }
            Some(axis) => {
                let (values, shape) = self.axis_reduce(x, axis, true);
                self.record(shape, values, |o| Op::MeanAxis { x, axis, out: o })
            }
        }
    }

    fn axis_reduce(&self, x: TensorId, axis: usize, mean: bool) -> (Vec<f64>, Shape) {
        let (r, c) = (self.shape(x).rows(), self.shape(x).cols());
        assert!(axis < 2, "axis {axis} out of range for rank-2 tensor");
        let xv = self.values(x);
        if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += xv[i * c + j];
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= r as f64);
            }
            (out, Shape::Vector(c))
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = xv[i * c..(i + 1) * c].iter().sum();
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= c as f64);
            }
            (out, Shape::Vector(r))
        }
    }

    /// Contiguous row range `[from, to)` of a matrix.
    pub fn rows(&mut self, x: TensorId, from: usize, to: usize) -> TensorId {
        let (r, c) = (self.shape(x).rows(), self.shape(x).cols());
        assert!(from < to && to <= r, "row range {from}..{to} out of {r}");
        let out = self.values(x)[from * c..to * c].to_vec();
        self.record(Shape::Matrix(to - from, c), out, |o| Op::Rows { x, from, out: o })
    }

    /// Single matrix row as a vector.
    pub fn row_vector(&mut self, x: TensorId, row: usize) -> TensorId {
        let c = self.shape(x).cols();
        let picked = self.rows(x, row, row + 1);
        self.reshape(picked, Shape::Vector(c))
    }

    /// Contiguous range `[from, to)` of a vector.
    pub fn slice(&mut self, x: TensorId, from: usize, to: usize) -> TensorId {
        let n = match self.shape(x) {
            Shape::Vector(n) => n,
            other => panic!("slice expects a vector, got {other:?}"),
        };
        assert!(from < to && to <= n, "slice range {from}..{to} out of {n}");
        let out = self.values(x)[from..to].to_vec();
        self.record(Shape::Vector(to - from), out, |o| Op::Slice { x, from, out: o })
    }

    /// Concatenate scalars/vectors into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut out = Vec::new();
        for &p in parts {
            match self.shape(p) {
                Shape::Scalar | Shape::Vector(_) => out.extend_from_slice(self.values(p)),
                other => panic!("concat expects scalars or vectors, got {other:?}"),
            }
        }
        let n = out.len();
        let parts = parts.to_vec();
        self.record(Shape::Vector(n), out, |o| Op::Concat { parts, out: o })
    }

    /// Stack equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "stack of nothing");
        let c = match self.shape(parts[0]) {
            Shape::Vector(n) => n,
            other => panic!("stack_rows expects vectors, got {other:?}"),
        };
        let mut out = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            assert_eq!(self.shape(p), Shape::Vector(c), "ragged stack_rows");
            out.extend_from_slice(self.values(p));
        }
        let shape = Shape::Matrix(parts.len(), c);
        let parts = parts.to_vec();
        self.record(shape, out, |o| Op::StackRows { parts, out: o })
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_matrix_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.shape(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).cols(), c, "column mismatch in row concat");
            rows += self.shape(p).rows();
            out.extend_from_slice(self.values(p));
        }
        let parts = parts.to_vec();
        self.record(Shape::Matrix(rows, c), out, |o| Op::ConcatRows { parts, out: o })
    }

    /// Pick matrix rows by index (duplicates allowed); gradients
    /// scatter-add back.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[u32]) -> TensorId {
        let (r, c) = (self.shape(x).rows(), self.shape(x).cols());
        assert!(!indices.is_empty());
        assert!(indices.iter().all(|&i| (i as usize) < r), "gather index out of range");
        let xv = self.values(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xv[i as usize * c..(i as usize + 1) * c]);
        }
        let shape = Shape::Matrix(indices.len(), c);
        let indices = indices.to_vec();
        self.record(shape, out, |o| Op::GatherRows { x, indices, out: o })
    }

    /// Append one constant column: `out[r, ..c] = mat[r, ..], out[r, c] = col[r]`.
    pub fn append_col_const(&mut self, mat: TensorId, col: &[f64]) -> TensorId {
        let (r, c) = (self.shape(mat).rows(), self.shape(mat).cols());
        assert_eq!(col.len(), r, "column length != rows");
        let mv = self.values(mat);
        let mut out = Vec::with_capacity(r * (c + 1));
        for i in 0..r {
            out.extend_from_slice(&mv[i * c..(i + 1) * c]);
            out.push(col[i]);
        }
        let shape = Shape::Matrix(r, c + 1);
        self.record(shape, out, |o| Op::AppendColConst { mat, out: o })
    }

    /// Per-row constant blend: `out[i,:] = mask[i]·on[i,:] + (1−mask[i])·off[i,:]`.
    pub fn row_mask_lerp(&mut self, on: TensorId, off: TensorId, mask: &[f64]) -> TensorId {
        let shape = self.shape(on);
        assert_eq!(shape, self.shape(off), "mask lerp shape mismatch");
        let rows = match shape {
            Shape::Matrix(r, _) => r,
            Shape::Vector(n) => n,
            Shape::Scalar => 1,
        };
        assert_eq!(mask.len(), rows, "mask length != rows");
        let cols = shape.numel() / rows;
        let on_v = self.values(on);
        let off_v = self.values(off);
        let mut out = vec![0.0; shape.numel()];
        for i in 0..rows {
            let m = mask[i];
            for j in 0..cols {
                let k = i * cols + j;
                out[k] = m * on_v[k] + (1.0 - m) * off_v[k];
            }
        }
        let mask = mask.to_vec();
        self.record(shape, out, |o| Op::RowMaskLerp { on, off, mask, out: o })
    }

    /// Cosine similarity of every row of `m` against `v`, with each norm
    /// clamped below by `eps`.
    pub fn cosine_rows(&mut self, m: TensorId, v: TensorId, eps: f64) -> TensorId {
        let (r, c) = (self.shape(m).rows(), self.shape(m).cols());
        assert_eq!(self.shape(v), Shape::Vector(c), "cosine operand length mismatch");
        assert!(eps > 0.0);
        let vv = self.values(v);
        let nv = norm(vv).max(eps);
        let mv = self.values(m);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &mv[i * c..(i + 1) * c];
            let nu = norm(row).max(eps);
            let d: f64 = row.iter().zip(vv).map(|(a, b)| a * b).sum();
            out[i] = d / (nu * nv);
        }
        self.record(Shape::Vector(r), out, |o| Op::CosineRows { m, v, eps, out: o })
    }

    /// Cosine similarity between two vectors of equal length.
    pub fn cosine(&mut self, u: TensorId, v: TensorId, eps: f64) -> TensorId {
        let d = match self.shape(u) {
            Shape::Vector(d) => d,
            other => panic!("cosine expects vectors, got {other:?}"),
        };
        let as_row = self.reshape(u, Shape::Matrix(1, d));
        let sims = self.cosine_rows(as_row, v, eps);
        self.reshape(sims, Shape::Scalar)
    }

    /// Euclidean projection of a vector onto the probability simplex.
    pub fn sparsemax(&mut self, z: TensorId) -> TensorId {
        let shape = self.shape(z);
        assert!(matches!(shape, Shape::Vector(_)), "sparsemax expects a vector");
        assert!(
            self.values(z).iter().all(|v| v.is_finite()),
            "sparsemax: non-finite input"
        );
        let out = sparsemax(self.values(z));
        debug_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        self.record(shape, out, |o| Op::Sparsemax { z, out: o })
    }

    /// Euclidean norm with an `eps` guard on the backward division.
    pub fn norm2(&mut self, v: TensorId, eps: f64) -> TensorId {
        assert!(matches!(self.shape(v), Shape::Vector(_)));
        let y = norm(self.values(v));
        self.record(Shape::Scalar, vec![y], |o| Op::Norm2 { v, eps, out: o })
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape(a);
        assert!(matches!(shape, Shape::Vector(_)));
        assert_eq!(shape, self.shape(b), "dot length mismatch");
        let d: f64 = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).sum();
        self.record(Shape::Scalar, vec![d], |o| Op::Dot { a, b, out: o })
    }

    /// `out[i,:] = coeffs[i] · v` for a constant coefficient vector.
    pub fn outer_const(&mut self, coeffs: &[f64], v: TensorId) -> TensorId {
        let k = match self.shape(v) {
            Shape::Vector(k) => k,
            other => panic!("outer_const expects a vector, got {other:?}"),
        };
        assert!(!coeffs.is_empty());
        debug_assert!(coeffs.iter().all(|c| c.is_finite()));
        let vv = self.values(v);
        let mut out = Vec::with_capacity(coeffs.len() * k);
        for &c in coeffs {
            out.extend(vv.iter().map(|&x| c * x));
        }
        let shape = Shape::Matrix(coeffs.len(), k);
        let coeffs = coeffs.to_vec();
        self.record(shape, out, |o| Op::OuterConst { coeffs, v, out: o })
    }

    /// Reinterpret the same elements under a new shape.
    pub fn reshape(&mut self, x: TensorId, shape: Shape) -> TensorId {
        assert_eq!(self.shape(x).numel(), shape.numel(), "reshape numel mismatch");
        let out = self.values(x).to_vec();
        self.record(shape, out, |o| Op::Reshape { x, out: o })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss; every reachable node receives
    /// its accumulated gradient. Leaf gradients accumulate across calls;
    /// interior gradients are recomputed each time.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.shape(loss), Shape::Scalar, "backward on non-scalar loss");
        assert!(
            self.value(loss).is_finite(),
            "backward on non-finite loss {}",
            self.value(loss)
        );
        for node in &mut self.nodes {
            if node.producer.is_some() {
                node.grad = None;
            }
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
    }

    fn backward_op(&mut self, op_index: usize) {
        // Ops are append-only; take the op out to sidestep the borrow.
        let placeholder = Op::Reshape {
            x: TensorId { tape: self.id, index: 0 },
            out: TensorId { tape: self.id, index: 0 },
        };
        let op = std::mem::replace(&mut self.ops[op_index], placeholder);
        let out = op_output(&op);

        // Take the upstream gradient without copying; nothing flowed
        // through this op if it is absent.
        let dout = match self.nodes[out.index as usize].grad.take() {
            Some(g) => g,
            None => {
                self.ops[op_index] = op;
                return;
            }
        };

        match &op {
            Op::MatMul { a, b, .. } => {
                let (p, q) = (self.shape(*a).rows(), self.shape(*a).cols());
                let r = self.shape(*b).cols();
                // da += dout · bᵀ
                let bv = self.values(*b);
                let mut da = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..r {
                        let d = dout[i * r + j];
                        if d != 0.0 {
                            for k in 0..q {
                                da[i * q + k] += d * bv[k * r + j];
                            }
                        }
                    }
                }
                // db += aᵀ · dout
                let av = self.values(*a);
                let mut db = vec![0.0; q * r];
                for i in 0..p {
                    for k in 0..q {
                        let x = av[i * q + k];
                        if x != 0.0 {
                            for j in 0..r {
                                db[k * r + j] += x * dout[i * r + j];
                            }
                        }
                    }
                }
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::Transpose { x, .. } => {
                let (r, c) = (self.shape(*x).rows(), self.shape(*x).cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dout[j * r + i];
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::Add { a, b, .. } => {
                self.accumulate(*a, &dout);
                self.accumulate(*b, &dout);
            }
            Op::Sub { a, b, .. } => {
                self.accumulate(*a, &dout);
                let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                self.accumulate_owned(*b, neg);
            }
            Op::Mul { a, b, .. } => {
                let da: Vec<f64> = dout.iter().zip(self.values(*b)).map(|(d, y)| d * y).collect();
                let db: Vec<f64> = dout.iter().zip(self.values(*a)).map(|(d, x)| d * x).collect();
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::Scale { x, c, .. } => {
                let dx: Vec<f64> = dout.iter().map(|d| d * c).collect();
                self.accumulate_owned(*x, dx);
            }
            Op::AddRowBroadcast { mat, row, .. } => {
                let c = self.shape(*row).numel();
                let mut drow = vec![0.0; c];
                for (k, d) in dout.iter().enumerate() {
                    drow[k % c] += d;
                }
                self.accumulate(*mat, &dout);
                self.accumulate_owned(*row, drow);
            }
            Op::Sigmoid { x, .. } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.values(out))
                    .map(|(d, &y)| d * y * (1.0 - y))
                    .collect();
                self.accumulate_owned(*x, dx);
            }
            Op::Tanh { x, .. } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.values(out))
                    .map(|(d, &y)| d * (1.0 - y * y))
                    .collect();
                self.accumulate_owned(*x, dx);
            }
            Op::Ln { x, .. } => {
                let dx: Vec<f64> = dout.iter().zip(self.values(*x)).map(|(d, &v)| d / v).collect();
                self.accumulate_owned(*x, dx);
            }
            Op::Clamp { x, lo, hi, .. } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.values(*x))
                    .map(|(d, &v)| if v >= *lo && v <= *hi { *d } else { 0.0 })
                    .collect();
                self.accumulate_owned(*x, dx);
            }
            Op::SumAll { x, .. } => {
                let dx = vec![dout[0]; self.shape(*x).numel()];
                self.accumulate_owned(*x, dx);
            }
            Op::MeanAll { x, .. } => {
                let n = self.shape(*x).numel();
                let dx = vec![dout[0] / n as f64; n];
                self.accumulate_owned(*x, dx);
            }
            Op::SumAxis { x, axis, .. } | Op::MeanAxis { x, axis, .. } => {
                let (r, c) = (self.shape(*x).rows(), self.shape(*x).cols());
                let denom = if matches!(op, Op::MeanAxis { .. }) {
                    if *axis == 0 { r as f64 } else { c as f64 }
                } else {
                    1.0
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let d = if *axis == 0 { dout[j] } else { dout[i] };
                        dx[i * c + j] = d / denom;
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::Rows { x, from, .. } => {
                let (r, c) = (self.shape(*x).rows(), self.shape(*x).cols());
                let mut dx = vec![0.0; r * c];
                dx[from * c..from * c + dout.len()].copy_from_slice(&dout);
                self.accumulate_owned(*x, dx);
            }
            Op::Slice { x, from, .. } => {
                let n = self.shape(*x).numel();
                let mut dx = vec![0.0; n];
                dx[*from..from + dout.len()].copy_from_slice(&dout);
                self.accumulate_owned(*x, dx);
            }
            Op::Concat { parts, .. } | Op::StackRows { parts, .. } | Op::ConcatRows { parts, .. } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p).numel();
                    self.accumulate(p, &dout[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows { x, indices, .. } => {
                let (r, c) = (self.shape(*x).rows(), self.shape(*x).cols());
                let mut dx = vec![0.0; r * c];
                for (i, &idx) in indices.iter().enumerate() {
                    let from = i * c;
                    let to = idx as usize * c;
                    for j in 0..c {
                        dx[to + j] += dout[from + j];
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::AppendColConst { mat, .. } => {
                let (r, c) = (self.shape(*mat).rows(), self.shape(*mat).cols());
                let mut dm = vec![0.0; r * c];
                for i in 0..r {
                    dm[i * c..(i + 1) * c].copy_from_slice(&dout[i * (c + 1)..i * (c + 1) + c]);
                }
                self.accumulate_owned(*mat, dm);
            }
            Op::RowMaskLerp { on, off, mask, .. } => {
                let numel = self.shape(*on).numel();
                let cols = numel / mask.len();
                let mut don = vec![0.0; numel];
                let mut doff = vec![0.0; numel];
                for i in 0..mask.len() {
                    for j in 0..cols {
                        let k = i * cols + j;
                        don[k] = mask[i] * dout[k];
                        doff[k] = (1.0 - mask[i]) * dout[k];
                    }
                }
                self.accumulate_owned(*on, don);
                self.accumulate_owned(*off, doff);
            }
            Op::CosineRows { m, v, eps, .. } => {
                let (r, c) = (self.shape(*m).rows(), self.shape(*m).cols());
                let mv = self.values(*m);
                let vv = self.values(*v);
                let raw_nv = norm(vv);
                let nv = raw_nv.max(*eps);
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    let d = dout[i];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mv[i * c..(i + 1) * c];
                    let raw_nu = norm(row);
                    let nu = raw_nu.max(*eps);
                    let ip: f64 = row.iter().zip(vv).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        // d cos / d row_j
                        let mut g = vv[j] / (nu * nv);
                        if raw_nu > *eps {
                            g -= ip * row[j] / (nu * nu * nu * nv);
                        }
                        dm[i * c + j] += d * g;
                        // d cos / d v_j
                        let mut h = row[j] / (nu * nv);
                        if raw_nv > *eps {
                            h -= ip * vv[j] / (nu * nv * nv * nv);
                        }
                        dv[j] += d * h;
                    }
                }
                self.accumulate_owned(*m, dm);
                self.accumulate_owned(*v, dv);
            }
            Op::Sparsemax { z, .. } => {
                let dz = sparsemax_backward(self.values(out), &dout);
                self.accumulate_owned(*z, dz);
            }
            Op::Norm2 { v, eps, .. } => {
                let y = self.values(out)[0].max(*eps);
                let dv: Vec<f64> = self.values(*v).iter().map(|&x| dout[0] * x / y).collect();
                self.accumulate_owned(*v, dv);
            }
            Op::Dot { a, b, .. } => {
                let da: Vec<f64> = self.values(*b).iter().map(|&y| dout[0] * y).collect();
                let db: Vec<f64> = self.values(*a).iter().map(|&x| dout[0] * x).collect();
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::OuterConst { coeffs, v, .. } => {
                let k = self.shape(*v).numel();
                let mut dv = vec![0.0; k];
                for (i, &c) in coeffs.iter().enumerate() {
                    if c != 0.0 {
                        for j in 0..k {
                            dv[j] += c * dout[i * k + j];
                        }
                    }
                }
                self.accumulate_owned(*v, dv);
            }
            Op::Reshape { x, .. } => {
                self.accumulate(*x, &dout);
            }
        }

        self.nodes[out.index as usize].grad = Some(dout);
        self.ops[op_index] = op;
    }
}

fn op_output(op: &Op) -> TensorId {
    match op {
        Op::MatMul { out, .. }
        | Op::Transpose { out, .. }
        | Op::Add { out, .. }
        | Op::Sub { out, .. }
        | Op::Mul { out, .. }
        | Op::Scale { out, .. }
        | Op::AddRowBroadcast { out, .. }
        | Op::Sigmoid { out, .. }
        | Op::Tanh { out, .. }
        | Op::Ln { out, .. }
        | Op::Clamp { out, .. }
        | Op::SumAll { out, .. }
        | Op::MeanAll { out, .. }
        | Op::SumAxis { out, .. }
        | Op::MeanAxis { out, .. }
        | Op::Rows { out, .. }
        | Op::Slice { out, .. }
        | Op::Concat { out, .. }
        | Op::StackRows { out, .. }
        | Op::ConcatRows { out, .. }
        | Op::GatherRows { out, .. }
        | Op::AppendColConst { out, .. }
        | Op::RowMaskLerp { out, .. }
        | Op::CosineRows { out, .. }
        | Op::Sparsemax { out, .. }
        | Op::Norm2 { out, .. }
        | Op::Dot { out, .. }
        | Op::OuterConst { out, .. }
        | Op::Reshape { out, .. } => *out,
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[k * r..(k + 1) * r];
                for j in 0..r {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], Shape::Matrix(2, 2));
        let a = t.leaf(vec![3.0, -1.0, 2.5, 7.0], Shape::Matrix(2, 2));
        let out = t.matmul(eye, a);
        close(t.values(out), t.values(a), 0.0);
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::Matrix(2, 2));
        let b = t.leaf(vec![0.0, 1.0], Shape::Matrix(2, 1));
        let out = t.matmul(a, b);
        close(t.values(out), &[2.0, 4.0], 0.0);
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transpose() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4], Shape::Matrix(2, 3));
        let b = t.leaf(vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.25], Shape::Matrix(3, 2));
        let out = t.matmul(a, b);
        let loss = t.sum(out, None);
        t.backward(loss);
        // d sum(A·B) / dA = ones(2x2) · Bᵀ, i.e. row sums of B broadcast.
        let bsums: Vec<f64> = (0..3).map(|k| t.values(b)[2 * k] + t.values(b)[2 * k + 1]).collect();
        let expect = [bsums[0], bsums[1], bsums[2], bsums[0], bsums[1], bsums[2]];
        close(&t.grad_or_zeros(a), &expect, 1e-15);
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0], Shape::Vector(1));
        let s = t.sigmoid(x);
        let h = t.tanh(x);
        assert_eq!(t.values(s)[0], 0.5);
        assert_eq!(t.values(h)[0], 0.0);
    }

    #[test]
    fn mean_grad_distributes_exactly() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0, 4.0, 6.0, 8.0], Shape::Vector(4));
        let m = t.mean(x, None);
        assert_eq!(t.value(m), 5.0);
        t.backward(m);
        close(&t.grad_or_zeros(x), &[0.25; 4], 0.0);
    }

    #[test]
    fn mean_of_two() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0, 4.0], Shape::Vector(2));
        let m = t.mean(x, None);
        assert_eq!(t.value(m), 3.0);
    }

    #[test]
    fn sum_axis0_matches_hand_value() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::Matrix(2, 2));
        let s = t.sum(x, Some(0));
        close(t.values(s), &[4.0, 6.0], 0.0);
        let loss = t.sum(s, None);
        t.backward(loss);
        close(&t.grad_or_zeros(x), &[1.0; 4], 0.0);
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let mut t = Tape::new();
        let u = t.leaf(vec![0.3, -0.7, 2.0], Shape::Vector(3));
        let v = t.leaf(vec![0.3, -0.7, 2.0], Shape::Vector(3));
        let c = t.cosine(u, v, 1e-8);
        assert!((t.value(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_unit_vectors_is_zero() {
        let mut t = Tape::new();
        let u = t.leaf(vec![1.0, 0.0], Shape::Vector(2));
        let v = t.leaf(vec![0.0, 1.0], Shape::Vector(2));
        let c = t.cosine(u, v, 1e-8);
        assert_eq!(t.value(c), 0.0);
    }

    #[test]
    fn cosine_hand_value() {
        let mut t = Tape::new();
        let u = t.leaf(vec![1.0, 0.0], Shape::Vector(2));
        let v = t.leaf(vec![1.0, 1.0], Shape::Vector(2));
        let c = t.cosine(u, v, 1e-8);
        assert!((t.value(c) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_over_leaf_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(vec![0.1, 0.2, 0.3], Shape::Vector(3));
        let loss = t.sum(w, None);
        t.backward(loss);
        close(&t.grad_or_zeros(w), &[1.0; 3], 0.0);
        // Gradient of the loss w.r.t. itself is 1.
        close(&t.grad_or_zeros(loss), &[1.0], 0.0);
    }

    #[test]
    fn backward_through_one_hot_sparsemax_is_zero() {
        let mut t = Tape::new();
        let z = t.leaf(vec![3.0, 0.0], Shape::Vector(2));
        let p = t.sparsemax(z);
        let first = t.slice(p, 0, 1);
        let loss = t.sum(first, None);
        t.backward(loss);
        close(&t.grad_or_zeros(z), &[0.0, 0.0], 0.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0], Shape::Vector(1));
        let loss = t.sum(w, None);
        t.backward(loss);
        t.backward(loss);
        close(&t.grad_or_zeros(w), &[2.0], 0.0);
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = 2x + 3x, dy/dx = 5
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5], Shape::Scalar);
        let a = t.scale(x, 2.0);
        let b = t.scale(x, 3.0);
        let y = t.add(a, b);
        t.backward(y);
        close(&t.grad_or_zeros(x), &[5.0], 1e-15);
    }

    #[test]
    fn row_mask_lerp_selects_rows() {
        let mut t = Tape::new();
        let on = t.leaf(vec![1.0, 1.0, 2.0, 2.0], Shape::Matrix(2, 2));
        let off = t.leaf(vec![9.0, 9.0, 8.0, 8.0], Shape::Matrix(2, 2));
        let out = t.row_mask_lerp(on, off, &[1.0, 0.0]);
        close(t.values(out), &[1.0, 1.0, 8.0, 8.0], 0.0);
        let loss = t.sum(out, None);
        t.backward(loss);
        close(&t.grad_or_zeros(on), &[1.0, 1.0, 0.0, 0.0], 0.0);
        close(&t.grad_or_zeros(off), &[0.0, 0.0, 1.0, 1.0], 0.0);
    }

    #[test]
    fn gather_rows_scatters_gradients_back() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Shape::Matrix(3, 2));
        let picked = t.gather_rows(x, &[2, 0, 2]);
        close(t.values(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0);
        let loss = t.sum(picked, None);
        t.backward(loss);
        // Row 2 was picked twice.
        close(&t.grad_or_zeros(x), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
    }

    #[test]
    fn concat_matrix_rows_stacks_and_splits() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], Shape::Matrix(1, 2));
        let b = t.leaf(vec![3.0, 4.0, 5.0, 6.0], Shape::Matrix(2, 2));
        let stacked = t.concat_matrix_rows(&[a, b]);
        assert_eq!(t.shape(stacked), Shape::Matrix(3, 2));
        close(t.values(stacked), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.0);
        let top = t.rows(stacked, 0, 1);
        let loss = t.sum(top, None);
        t.backward(loss);
        close(&t.grad_or_zeros(a), &[1.0, 1.0], 0.0);
        close(&t.grad_or_zeros(b), &[0.0; 4], 0.0);
    }

    #[test]
    fn append_col_const_drops_constant_gradient() {
        let mut t = Tape::new();
        let m = t.leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::Matrix(2, 2));
        let grown = t.append_col_const(m, &[9.0, 8.0]);
        close(t.values(grown), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0], 0.0);
        let loss = t.sum(grown, None);
        t.backward(loss);
        close(&t.grad_or_zeros(m), &[1.0; 4], 0.0);
    }

    #[test]
    fn transpose_roundtrip_values_and_grads() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Shape::Matrix(2, 3));
        let xt = t.transpose(x);
        assert_eq!(t.shape(xt), Shape::Matrix(3, 2));
        close(t.values(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], 0.0);
        let back = t.transpose(xt);
        close(t.values(back), t.values(x), 0.0);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], Shape::Matrix(1, 2));
        let b = t.leaf(vec![1.0, 2.0, 3.0], Shape::Matrix(3, 1));
        t.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "non-scalar")]
    fn backward_on_vector_panics() {
        let mut t = Tape::new();
        let v = t.leaf(vec![1.0, 2.0], Shape::Vector(2));
        t.backward(v);
    }

    #[test]
    #[should_panic(expected = "foreign tape")]
    fn foreign_tensor_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(vec![1.0], Shape::Scalar);
        let _ = t2.scale(a, 2.0);
    }
}
