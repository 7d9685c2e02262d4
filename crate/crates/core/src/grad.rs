//! Reverse-mode differentiation on a tape of dense-tensor primitives.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! walks the record once in reverse and accumulates adjoints, so gradients
//! with respect to every leaf come out of a single pass. The op set is
//! deliberately small: elementwise arithmetic, matmul, valid-mode 2-D
//! cross-correlation, a guarded log, the usual activations and a few
//! shape utilities.
//!
//! Primitives assert on shape mismatch (that is a caller bug, not a
//! runtime condition). `backward` returns an error for a non-scalar
//! target.
//!
//! Precision: a tape runs in [`Precision::Double`] (the default, required
//! for finite-difference checking) or [`Precision::Single`], where the two
//! expensive kernels (matmul, cross-correlation) compute in `f32`. Single
//! mode exists for the training loop; results are deterministic in both.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Arithmetic mode of the heavy kernels on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// All arithmetic in `f64`. Required for gradient checking.
    Double,
    /// matmul / xcorr2d compute in `f32`; everything else stays `f64`.
    Single,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    // tensor (op) scalar-node, broadcast over the tensor
    AddS(NodeId, NodeId),
    SubS(NodeId, NodeId),
    MulS(NodeId, NodeId),
    DivS(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Xcorr2dValid(NodeId, NodeId),
    LogGuarded(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Cos(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    // f32 mirror of the value, populated in Single mode
    value32: Option<Vec<f32>>,
    op: Op,
    // constants never receive adjoints; the heavy ops skip the
    // corresponding halves of their backward kernels
    constant: bool,
}

/// Record of primitive operations; single-owner and sequential.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward target with respect to `id`, if any path
    /// reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient as an owned tensor, zeros when no path reached the node.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let value32 = match self.precision {
            Precision::Single => Some(value.data().iter().map(|&v| v as f32).collect()),
            Precision::Double => None,
        };
        // an op fed only by constants yields a constant: backward never
        // enters such a subgraph
        let constant = match &op {
            Op::Leaf => false,
            other => op_inputs(other).iter().all(|id| self.nodes[id.0].constant),
        };
        self.nodes.push(Node {
            value,
            value32,
            op,
            constant,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf that never receives an adjoint (inputs, references, fixed
    /// kernels). Backward skips work that only feeds constants.
    pub fn leaf_const(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].constant = true;
        id
    }

    fn is_const(&self, id: NodeId) -> bool {
        self.nodes[id.0].constant
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "div");
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    fn scalar_of(&self, s: NodeId, what: &str) -> f64 {
        assert_eq!(self.value(s).numel(), 1, "{what}: scalar operand expected");
        self.value(s).item()
    }

    pub fn add_s(&mut self, t: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_of(s, "add_s");
        let v = self.value(t).map(|x| x + sv);
        self.push(v, Op::AddS(t, s))
    }

    pub fn sub_s(&mut self, t: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_of(s, "sub_s");
        let v = self.value(t).map(|x| x - sv);
        self.push(v, Op::SubS(t, s))
    }

    pub fn mul_s(&mut self, t: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_of(s, "mul_s");
        let v = self.value(t).map(|x| x * sv);
        self.push(v, Op::MulS(t, s))
    }

    pub fn div_s(&mut self, t: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_of(s, "div_s");
        let v = self.value(t).map(|x| x / sv);
        self.push(v, Op::DivS(t, s))
    }

    /// Add a `[1, C]` row vector to every row of a `[T, C]` tensor.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.shape().len(), 2, "add_row: row must be rank 2");
        assert_eq!(rv.rows(), 1, "add_row: row operand must have one row");
        assert_eq!(xv.cols(), rv.cols(), "add_row: column counts differ");
        let mut data = Vec::with_capacity(xv.numel());
        for t in 0..xv.rows() {
            for (a, b) in xv.row(t).iter().zip(rv.row(0)) {
                data.push(a + b);
            }
        }
        let v = Tensor::from_vec(xv.shape(), data);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2, "matmul: lhs must be rank 2");
        assert_eq!(bv.shape().len(), 2, "matmul: rhs must be rank 2");
        assert_eq!(
            av.cols(),
            bv.rows(),
            "matmul: inner dimensions differ ({} vs {})",
            av.cols(),
            bv.rows()
        );
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let value = match self.precision {
            Precision::Double => {
                let mut out = vec![0.0f64; m * n];
                matmul_kernel(av.data(), bv.data(), &mut out, m, k, n);
                Tensor::from_vec(&[m, n], out)
            }
            Precision::Single => {
                let a32 = self.nodes[a.0].value32.as_ref().unwrap();
                let b32 = self.nodes[b.0].value32.as_ref().unwrap();
                let mut out = vec![0.0f32; m * n];
                matmul_kernel(a32, b32, &mut out, m, k, n);
                Tensor::from_vec(&[m, n], out.iter().map(|&v| v as f64).collect())
            }
        };
        self.push(value, Op::MatMul(a, b))
    }

    /// Valid-mode 2-D cross-correlation of `x` [T,B] with `k` [Tk,Ck],
    /// producing [T-Tk+1, B-Ck+1]. No flipping, no padding.
    pub fn xcorr2d_valid(&mut self, x: NodeId, k: NodeId) -> NodeId {
        let (xv, kv) = (self.value(x), self.value(k));
        assert_eq!(xv.shape().len(), 2, "xcorr2d_valid: input must be rank 2");
        assert_eq!(kv.shape().len(), 2, "xcorr2d_valid: kernel must be rank 2");
        assert!(
            xv.rows() >= kv.rows() && xv.cols() >= kv.cols(),
            "xcorr2d_valid: input {}x{} smaller than kernel {}x{}",
            xv.rows(),
            xv.cols(),
            kv.rows(),
            kv.cols()
        );
        let (t_out, c_out) = (xv.rows() - kv.rows() + 1, xv.cols() - kv.cols() + 1);
        let value = match self.precision {
            Precision::Double => {
                let mut out = vec![0.0f64; t_out * c_out];
                xcorr2d_kernel(
                    xv.data(),
                    kv.data(),
                    &mut out,
                    xv.cols(),
                    kv.rows(),
                    kv.cols(),
                    t_out,
                    c_out,
                );
                Tensor::from_vec(&[t_out, c_out], out)
            }
            Precision::Single => {
                let x32 = self.nodes[x.0].value32.as_ref().unwrap();
                let k32 = self.nodes[k.0].value32.as_ref().unwrap();
                let mut out = vec![0.0f32; t_out * c_out];
                xcorr2d_kernel(
                    x32,
                    k32,
                    &mut out,
                    xv.cols(),
                    kv.rows(),
                    kv.cols(),
                    t_out,
                    c_out,
                );
                Tensor::from_vec(&[t_out, c_out], out.iter().map(|&v| v as f64).collect())
            }
        };
        self.push(value, Op::Xcorr2dValid(x, k))
    }

    /// `ln(max(x, floor))`. The gradient is zero wherever the clamp is
    /// active (subgradient convention).
    pub fn log_guarded(&mut self, x: NodeId, floor: f64) -> NodeId {
        assert!(floor > 0.0, "log_guarded: floor must be positive");
        let v = self.value(x).map(|v| v.max(floor).ln());
        self.push(v, Op::LogGuarded(x, floor))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        self.push(v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::sqrt);
        self.push(v, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::cos);
        self.push(v, Op::Cos(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Op::AddConst(x))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows: column counts differ");
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::from_vec(&[rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Contiguous row block `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        assert!(
            start + len <= xv.rows(),
            "slice_rows: [{start}, {}) out of range for {} rows",
            start + len,
            xv.rows()
        );
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(&[len, cols], data), Op::SliceRows { x, start, len })
    }

    /// Select rows of a rank-2 tensor in an arbitrary order.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            assert!(r < xv.rows(), "gather_rows: row {r} out of range");
            data.extend_from_slice(xv.row(r));
        }
        self.push(
            Tensor::from_vec(&[indices.len(), cols], data),
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value(x).numel(), "reshape: element count differs");
        let v = self.value(x).reshaped(shape);
        self.push(v, Op::Reshape(x))
    }

    /// Reverse sweep from a scalar `output`; every node is visited once
    /// and fan-out adjoints accumulate additively.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if self.nodes[id.0].constant {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, go.clone());
                self.accumulate(grads, *b, go.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, go.clone());
                self.accumulate(grads, *b, go.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_map(go, self.value(*b), |g, y| g * y);
                let db = zip_map(go, self.value(*a), |g, x| g * x);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let da = zip_map(go, bv, |g, y| g / y);
                let db_data: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .zip(bv.data())
                    .map(|((g, x), y)| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db_data));
            }
            Op::AddS(t, s) => {
                self.accumulate(grads, *t, go.clone());
                self.accumulate(grads, *s, Tensor::scalar(go.sum()));
            }
            Op::SubS(t, s) => {
                self.accumulate(grads, *t, go.clone());
                self.accumulate(grads, *s, Tensor::scalar(-go.sum()));
            }
            Op::MulS(t, s) => {
                let sv = self.value(*s).item();
                let tv = self.value(*t);
                self.accumulate(grads, *t, go.map(|g| g * sv));
                let ds = go.data().iter().zip(tv.data()).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::DivS(t, s) => {
                let sv = self.value(*s).item();
                let tv = self.value(*t);
                self.accumulate(grads, *t, go.map(|g| g / sv));
                let ds: f64 = go.data().iter().zip(tv.data()).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, Tensor::scalar(-ds / (sv * sv)));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, go.clone());
                let cols = go.cols();
                let mut drow = vec![0.0f64; cols];
                for t in 0..go.rows() {
                    for (d, g) in drow.iter_mut().zip(go.row(t)) {
                        *d += g;
                    }
                }
                self.accumulate(grads, *row, Tensor::from_vec(&[1, cols], drow));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let (want_a, want_b) = (!self.is_const(*a), !self.is_const(*b));
                match self.precision {
                    Precision::Double => {
                        if want_a {
                            let mut da = vec![0.0f64; m * k];
                            matmul_bwd_da(bv.data(), go.data(), &mut da, m, k, n);
                            self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da));
                        }
                        if want_b {
                            let mut db = vec![0.0f64; k * n];
                            matmul_bwd_db(av.data(), go.data(), &mut db, m, k, n);
                            self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db));
                        }
                    }
                    Precision::Single => {
                        let go32: Vec<f32> = go.data().iter().map(|&v| v as f32).collect();
                        if want_a {
                            let b32 = self.nodes[b.0].value32.as_ref().unwrap();
                            let mut da = vec![0.0f32; m * k];
                            matmul_bwd_da(b32, &go32, &mut da, m, k, n);
                            self.accumulate(
                                grads,
                                *a,
                                Tensor::from_vec(&[m, k], da.iter().map(|&v| v as f64).collect()),
                            );
                        }
                        if want_b {
                            let a32 = self.nodes[a.0].value32.as_ref().unwrap();
                            let mut db = vec![0.0f32; k * n];
                            matmul_bwd_db(a32, &go32, &mut db, m, k, n);
                            self.accumulate(
                                grads,
                                *b,
                                Tensor::from_vec(&[k, n], db.iter().map(|&v| v as f64).collect()),
                            );
                        }
                    }
                }
            }
            Op::Xcorr2dValid(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (t_out, c_out) = (xv.rows() - kv.rows() + 1, xv.cols() - kv.cols() + 1);
                let (want_x, want_k) = (!self.is_const(*x), !self.is_const(*k));
                match self.precision {
                    Precision::Double => {
                        if want_x {
                            let mut dx = vec![0.0f64; xv.numel()];
                            xcorr2d_bwd_dx(
                                kv.data(),
                                go.data(),
                                &mut dx,
                                xv.cols(),
                                kv.rows(),
                                kv.cols(),
                                t_out,
                                c_out,
                            );
                            self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                        }
                        if want_k {
                            let mut dk = vec![0.0f64; kv.numel()];
                            xcorr2d_bwd_dk(
                                xv.data(),
                                go.data(),
                                &mut dk,
                                xv.cols(),
                                kv.rows(),
                                kv.cols(),
                                t_out,
                                c_out,
                            );
                            self.accumulate(grads, *k, Tensor::from_vec(kv.shape(), dk));
                        }
                    }
                    Precision::Single => {
                        let go32: Vec<f32> = go.data().iter().map(|&v| v as f32).collect();
                        if want_x {
                            let k32 = self.nodes[k.0].value32.as_ref().unwrap();
                            let mut dx = vec![0.0f32; xv.numel()];
                            xcorr2d_bwd_dx(
                                k32,
                                &go32,
                                &mut dx,
                                xv.cols(),
                                kv.rows(),
                                kv.cols(),
                                t_out,
                                c_out,
                            );
                            self.accumulate(
                                grads,
                                *x,
                                Tensor::from_vec(xv.shape(), dx.iter().map(|&v| v as f64).collect()),
                            );
                        }
                        if want_k {
                            let x32 = self.nodes[x.0].value32.as_ref().unwrap();
                            let mut dk = vec![0.0f32; kv.numel()];
                            xcorr2d_bwd_dk(
                                x32,
                                &go32,
                                &mut dk,
                                xv.cols(),
                                kv.rows(),
                                kv.cols(),
                                t_out,
                                c_out,
                            );
                            self.accumulate(
                                grads,
                                *k,
                                Tensor::from_vec(kv.shape(), dk.iter().map(|&v| v as f64).collect()),
                            );
                        }
                    }
                }
            }
            Op::LogGuarded(x, floor) => {
                let xv = self.value(*x);
                let dx = zip_map(go, xv, |g, v| if v > *floor { g / v } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[i].value;
                let dx = zip_map(go, yv, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[i].value;
                let dx = zip_map(go, yv, |g, y| g * (1.0 - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = zip_map(go, xv, |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let dx = zip_map(go, xv, |g, v| 2.0 * g * v);
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                let yv = &self.nodes[i].value;
                let dx = zip_map(go, yv, |g, y| g / (2.0 * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let yv = &self.nodes[i].value;
                let dx = zip_map(go, yv, |g, y| g * y);
                self.accumulate(grads, *x, dx);
            }
            Op::Cos(x) => {
                let xv = self.value(*x);
                let dx = zip_map(go, xv, |g, v| -g * v.sin());
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let g = go.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g = go.item() / n;
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, go.map(|g| g * c));
            }
            Op::AddConst(x) => {
                self.accumulate(grads, *x, go.clone());
            }
            Op::ConcatRows(parts) => {
                let cols = go.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let data = go.data()[row * cols..(row + r) * cols].to_vec();
                    self.accumulate(grads, p, Tensor::from_vec(&[r, cols], data));
                    row += r;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(go.data());
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (out_r, &src_r) in indices.iter().enumerate() {
                    let row = &go.data()[out_r * cols..(out_r + 1) * cols];
                    for (d, g) in dx.data_mut()[src_r * cols..(src_r + 1) * cols]
                        .iter_mut()
                        .zip(row)
                    {
                        *d += g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, go.reshaped(&shape));
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddS(a, b)
        | Op::SubS(a, b)
        | Op::MulS(a, b)
        | Op::DivS(a, b)
        | Op::AddRow(a, b)
        | Op::MatMul(a, b)
        | Op::Xcorr2dValid(a, b) => vec![*a, *b],
        Op::LogGuarded(x, _)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Square(x)
        | Op::Sqrt(x)
        | Op::Exp(x)
        | Op::Cos(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Scale(x, _)
        | Op::AddConst(x)
        | Op::Reshape(x) => vec![*x],
        Op::ConcatRows(parts) => parts.clone(),
        Op::SliceRows { x, .. } | Op::GatherRows { x, .. } => vec![*x],
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

trait Scalar:
    Copy
    + Default
    + core::ops::Add<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::AddAssign
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

const MM_BLOCK: usize = 32;

/// `out[m,n] = a[m,k] * b[k,n]`, row-major, `out` must be zeroed.
/// Output columns are processed in register-resident blocks so the
/// accumulators stay out of memory across the inner reduction.
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full = n - n % MM_BLOCK;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut jb = 0;
        while jb < full {
            let mut acc = [T::default(); MM_BLOCK];
            for (l, &av) in a_row.iter().enumerate() {
                let b_seg = &b[l * n + jb..l * n + jb + MM_BLOCK];
                for u in 0..MM_BLOCK {
                    acc[u] += av * b_seg[u];
                }
            }
            out_row[jb..jb + MM_BLOCK].copy_from_slice(&acc);
            jb += MM_BLOCK;
        }
        if jb < n {
            for (l, &av) in a_row.iter().enumerate() {
                let b_row = &b[l * n..(l + 1) * n];
                for j in jb..n {
                    out_row[j] += av * b_row[j];
                }
            }
        }
    }
}

/// `da = go * b^T`, via an explicit transpose so the multiply runs
/// through the same blocked kernel as the forward pass.
fn matmul_bwd_da<T: Scalar>(b: &[T], go: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::default(); n * k];
    for l in 0..k {
        for j in 0..n {
            bt[j * k + l] = b[l * n + j];
        }
    }
    matmul_kernel(go, &bt, da, m, n, k);
}

/// `db = a^T * go`, blocked like the forward kernel.
fn matmul_bwd_db<T: Scalar>(a: &[T], go: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    let full = n - n % MM_BLOCK;
    for l in 0..k {
        let db_row = &mut db[l * n..(l + 1) * n];
        let mut jb = 0;
        while jb < full {
            let mut acc = [T::default(); MM_BLOCK];
            for i in 0..m {
                let av = a[i * k + l];
                let go_seg = &go[i * n + jb..i * n + jb + MM_BLOCK];
                for u in 0..MM_BLOCK {
                    acc[u] += av * go_seg[u];
                }
            }
            db_row[jb..jb + MM_BLOCK].copy_from_slice(&acc);
            jb += MM_BLOCK;
        }
        if jb < n {
            for i in 0..m {
                let av = a[i * k + l];
                let go_row = &go[i * n..(i + 1) * n];
                for j in jb..n {
                    db_row[j] += av * go_row[j];
                }
            }
        }
    }
}

/// Valid-mode cross-correlation; `out` must be zeroed.
/// `out[t,c] = sum_{tau,gam} k[tau,gam] * x[t+tau, c+gam]`.
#[allow(clippy::too_many_arguments)]
fn xcorr2d_kernel<T: Scalar>(
    x: &[T],
    k: &[T],
    out: &mut [T],
    x_cols: usize,
    k_rows: usize,
    k_cols: usize,
    t_out: usize,
    c_out: usize,
) {
    const XB: usize = 16;
    let full = c_out - c_out % XB;
    for t in 0..t_out {
        let out_row = &mut out[t * c_out..(t + 1) * c_out];
        let mut cb = 0;
        while cb < full {
            let mut acc = [T::default(); XB];
            for tau in 0..k_rows {
                let x_row = &x[(t + tau) * x_cols..(t + tau + 1) * x_cols];
                let k_row = &k[tau * k_cols..(tau + 1) * k_cols];
                for (gam, &kv) in k_row.iter().enumerate() {
                    let x_seg = &x_row[cb + gam..cb + gam + XB];
                    for u in 0..XB {
                        acc[u] += kv * x_seg[u];
                    }
                }
            }
            out_row[cb..cb + XB].copy_from_slice(&acc);
            cb += XB;
        }
        if cb < c_out {
            for tau in 0..k_rows {
                let x_row = &x[(t + tau) * x_cols..(t + tau + 1) * x_cols];
                let k_row = &k[tau * k_cols..(tau + 1) * k_cols];
                for (gam, &kv) in k_row.iter().enumerate() {
                    let x_seg = &x_row[gam..gam + c_out];
                    for o in cb..c_out {
                        out_row[o] += kv * x_seg[o];
                    }
                }
            }
        }
    }
}

/// Input adjoint of valid cross-correlation: the full correlation of
/// `go` with the flipped kernel.
#[allow(clippy::too_many_arguments)]
fn xcorr2d_bwd_dx<T: Scalar>(
    k: &[T],
    go: &[T],
    dx: &mut [T],
    x_cols: usize,
    k_rows: usize,
    k_cols: usize,
    t_out: usize,
    c_out: usize,
) {
    for t in 0..t_out {
        let go_row = &go[t * c_out..(t + 1) * c_out];
        for tau in 0..k_rows {
            let dx_row = &mut dx[(t + tau) * x_cols..(t + tau + 1) * x_cols];
            let k_row = &k[tau * k_cols..(tau + 1) * k_cols];
            for (gam, &kv) in k_row.iter().enumerate() {
                let seg = &mut dx_row[gam..gam + c_out];
                for (d, &g) in seg.iter_mut().zip(go_row) {
                    *d += kv * g;
                }
            }
        }
    }
}

/// Kernel adjoint of valid cross-correlation: the valid cross-correlation
/// of the input with `go`.
#[allow(clippy::too_many_arguments)]
fn xcorr2d_bwd_dk<T: Scalar>(
    x: &[T],
    go: &[T],
    dk: &mut [T],
    x_cols: usize,
    k_rows: usize,
    k_cols: usize,
    t_out: usize,
    c_out: usize,
) {
    for t in 0..t_out {
        let go_row = &go[t * c_out..(t + 1) * c_out];
        for tau in 0..k_rows {
            let x_row = &x[(t + tau) * x_cols..(t + tau + 1) * x_cols];
            let dk_row = &mut dk[tau * k_cols..(tau + 1) * k_cols];
            // accumulate along the kernel row so the inner loop stays in
            // contiguous vector lanes
            for (c, &g) in go_row.iter().enumerate() {
                let x_seg = &x_row[c..c + k_cols];
                for (d, &xv) in dk_row.iter_mut().zip(x_seg) {
                    *d += g * xv;
                }
            }
        }
    }
}

/// Valid-mode 2-D cross-correlation as a plain function, sharing the
/// kernel (and therefore the rounding behavior) with the tape primitive.
pub fn xcorr2d_valid_direct(x: &Tensor, k: &Tensor) -> Tensor {
    assert!(
        x.rows() >= k.rows() && x.cols() >= k.cols(),
        "xcorr2d_valid_direct: input {}x{} smaller than kernel {}x{}",
        x.rows(),
        x.cols(),
        k.rows(),
        k.cols()
    );
    let (t_out, c_out) = (x.rows() - k.rows() + 1, x.cols() - k.cols() + 1);
    let mut out = vec![0.0f64; t_out * c_out];
    xcorr2d_kernel(
        x.data(),
        k.data(),
        &mut out,
        x.cols(),
        k.rows(),
        k.cols(),
        t_out,
        c_out,
    );
    Tensor::from_vec(&[t_out, c_out], out)
}

/// Compare the tape gradient of `f` against central finite differences,
/// coordinate by coordinate. Returns the maximum relative error, with
/// `max(|fd|, |analytic|, 1e-8)` in the denominator.
///
/// `f` must build its computation on the provided tape starting from the
/// leaf it is handed, and return the scalar output node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    assert!(h > 0.0, "finite_diff_check: h must be positive");
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(Precision::Double);
        let leaf = tape.leaf(probe.clone());
        let out = f(&mut tape, leaf);
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check probe"));
        }
        Ok(v)
    };

    let mut tape = Tape::new(Precision::Double);
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_or_zeros(leaf, x.shape());

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let an = analytic.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Result of [`finite_diff_check_filtered`].
#[derive(Clone, Copy, Debug)]
pub struct FilteredFdResult {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where the probe straddled a non-smooth point (ReLU
    /// kink, clamp boundary); central differences are not a valid oracle
    /// there, so they are excluded rather than compared.
    pub skipped_kinks: usize,
}

/// Like [`finite_diff_check`], for piecewise-smooth graphs (ReLU
/// networks) whose partials span many orders of magnitude.
///
/// Each coordinate is probed at several step widths and judged at its
/// best-resolved one: cancellation noise `eps |f| / h` caps the relative
/// precision reachable for a tiny partial at a small step, while a wide
/// step loses smooth accuracy to curvature, so no single width can
/// certify every coordinate. Richardson extrapolation removes the
/// leading curvature term at each width. Where a kink (ReLU boundary)
/// falls inside the smallest probe interval, central differences are not
/// a valid oracle; a subgradient matching one one-sided difference while
/// the sides disagree is excluded as a kink rather than compared. A
/// gradient matching no scale and no side is reported as an error.
pub fn finite_diff_check_filtered<F>(f: F, x: &Tensor, h: f64) -> Result<FilteredFdResult>
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    assert!(h > 0.0, "finite_diff_check_filtered: h must be positive");
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(Precision::Double);
        let leaf = tape.leaf(probe.clone());
        let out = f(&mut tape, leaf);
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check probe"));
        }
        Ok(v)
    };

    let mut tape = Tape::new(Precision::Double);
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let f0 = tape.value(out).item();
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_or_zeros(leaf, x.shape());

    let mut result = FilteredFdResult {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let scales = [h, 10.0 * h, 100.0 * h, 1000.0 * h];
    let noise_floor = 50.0 * f64::EPSILON * f0.abs().max(1.0) / scales[scales.len() - 1];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut eval_at = |delta: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + delta;
            let v = eval(&probe);
            probe.data_mut()[i] = orig;
            v
        };
        let an = analytic.data()[i];
        let mut err = f64::INFINITY;
        let mut small_scale_sides = (0.0, 0.0);
        let mut all_below_noise = true;
        for (si, &hs) in scales.iter().enumerate() {
            let fp = eval_at(hs)?;
            let fm = eval_at(-hs)?;
            let fp2 = eval_at(hs / 2.0)?;
            let fm2 = eval_at(-hs / 2.0)?;
            let fd1 = (fp - fm) / (2.0 * hs);
            let fd2 = (fp2 - fm2) / hs;
            // judge against the plain centrals and the Richardson
            // extrapolation; whichever is cleanest wins (a kink in the
            // outer half of the interval corrupts fd1 and the
            // extrapolation but leaves fd2 intact, and vice versa)
            let richardson = (4.0 * fd2 - fd1) / 3.0;
            for est in [fd1, fd2, richardson] {
                err = err.min(rel(est, an));
                if est.abs() > noise_floor {
                    all_below_noise = false;
                }
            }
            if si == 0 {
                small_scale_sides = ((fp2 - f0) / (hs / 2.0), (f0 - fm2) / (hs / 2.0));
            }
        }
        // indistinguishable from zero at every probe width
        if an.abs() <= noise_floor.max(1e-8) && all_below_noise {
            result.checked += 1;
            continue;
        }
        if err > 5e-5 {
            // a kink inside the probe interval invalidates the central
            // differences; the subgradient is valid if it matches one
            // one-sided difference tightly
            let (fwd, bwd) = small_scale_sides;
            if rel(an, fwd).min(rel(an, bwd)) < 2e-4 {
                result.skipped_kinks += 1;
                continue;
            }
        }
        result.checked += 1;
        if err > result.max_rel_err {
            result.max_rel_err = err;
        }
    }
    Ok(result)
}
