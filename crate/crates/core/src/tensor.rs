//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, so the node list is already a topological order. Calling
//! [`Graph::backward`] consumes the graph, walks it once in reverse and returns
//! the gradients of every leaf that was registered with `requires_grad`.
//!
//! Shapes are never broadcast. Row-wise operations (softmax, layer norm,
//! gather) act on the last axis of a 2-D tensor; callers reshape explicitly.
//! The one bias-style operation, [`Graph::add_bias`], adds a length-`n` vector
//! to every row of an `[m, n]` matrix and is a named op, not broadcasting.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty graph")]
    EmptyGraph,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zero tensor with positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("finite scalar")
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        visible: Option<Vec<usize>>,
    },
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the `requires_grad` leaves of a consumed graph.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(&var).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.remove(&var)
    }

    /// Writes the gradient of `var` into `tensor.grad`, zero-filled when the
    /// loss did not depend on it.
    pub fn populate(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let grad = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(grad)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded computation. See the module docs for the op contract.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators, which lets the
/// compiler vectorize the loop.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(arow, brow);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn to_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => rg(a) || rg(b),
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Softplus(x)
            | Op::Tanh(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Gather { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => rg(x),
            Op::Embedding { table, .. } => rg(table),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().any(rg),
        }
    }

    /// Registers a tensor; its `requires_grad` flag decides whether
    /// [`Graph::backward`] reports a gradient for it.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape.clone(),
            value: tensor.data.clone(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_requires_grad(true);
        Ok(self.leaf(&t))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        rows_cols(self.shape(v)).ok_or_else(|| TensorError::InvalidShape {
            op,
            shape: self.shape(v).to_vec(),
            reason: "expected a 2-D tensor",
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), shape, out, "scale")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// `x[m, n] + bias[n]` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_bias", x)?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        self.push(Op::AddBias(x, bias), vec![m, n], out, "add_bias")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        self.push(Op::Transpose(x), vec![n, m], out, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape(x), shape, out, "reshape")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax where row `i` only sees its first `visible[i]` columns;
    /// hidden columns get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, visible: Vec<usize>) -> Result<Var> {
        self.softmax_impl(x, Some(visible))
    }

    fn softmax_impl(&mut self, x: Var, visible: Option<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax", x)?;
        if let Some(vis) = &visible {
            if vis.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: vec![m, n],
                    right: vec![vis.len()],
                });
            }
            if let Some(&bad) = vis.iter().find(|&&k| k == 0 || k > n) {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_softmax",
                    index: bad,
                    bound: n,
                });
            }
        }
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let k = visible.as_ref().map_or(n, |vis| vis[i]);
            let row = &v[i * n..i * n + k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..i * n + k];
            let mut total = 0.0;
            for (o, &r) in orow.iter_mut().zip(row) {
                *o = (r - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        self.push(Op::Softmax { x, visible }, vec![m, n], out, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("log_softmax", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = r - lse;
            }
        }
        self.push(Op::LogSoftmax(x), vec![m, n], out, "log_softmax")
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log_sigmoid", log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    /// Picks `x[i, index[i]]` from every row, giving a `[m]` vector.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather", x)?;
        if index.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: vec![m, n],
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: n,
            });
        }
        let v = self.value(x);
        let out = index.iter().enumerate().map(|(i, &j)| v[i * n + j]).collect();
        self.push(Op::Gather { x, index }, vec![m], out, "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), vec![1], vec![s], "mean")
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vec![0, d],
                reason: "no ids",
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&id| t[id * d..(id + 1) * d].iter().copied())
            .collect();
        let rows = ids.len();
        self.push(Op::Embedding { table, ids }, vec![rows, d], out, "embedding")
    }

    /// Row-wise layer normalization with learned `gain[d]` and `bias[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![m, d],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &v[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push(op, vec![m, d], out, "layer_norm")
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "no inputs",
        })?;
        let (_, n) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, n2) = self.matrix_dims("concat_rows", x)?;
            if n2 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: vec![m, n2],
                });
            }
            rows += m;
            out.extend_from_slice(self.value(x));
        }
        self.push(Op::ConcatRows(xs.to_vec()), vec![rows, n], out, "concat_rows")
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "no inputs",
        })?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (m2, n) = self.matrix_dims("concat_cols", x)?;
            if m2 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: vec![m2, n],
                });
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &n) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * n..(i + 1) * n]);
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), vec![m, total], out, "concat_cols")
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_rows", x)?;
        if start >= end || end > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: m,
            });
        }
        let out = self.value(x)[start * n..end * n].to_vec();
        self.push(Op::SliceRows { x, start }, vec![end - start, n], out, "slice_rows")
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: n,
            });
        }
        let v = self.value(x);
        let out = (0..m)
            .flat_map(|i| v[i * n + start..i * n + end].iter().copied())
            .collect();
        self.push(Op::SliceCols { x, start }, vec![m, end - start], out, "slice_cols")
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph and returns the
    /// gradient of every leaf registered with `requires_grad`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        let loss_shape = &self.nodes[loss.0].shape;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.clone()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: Var, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let len = nodes[target.0].value.len();
    let slot = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
    contrib(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: &Var| nodes[v.0].value.as_slice();
    let shape = |v: &Var| nodes[v.0].shape.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(shape(a)).expect("matmul lhs");
            let n = shape(b)[1];
            accumulate(nodes, grads, *a, |ga| matmul_nt_acc(g, val(b), ga, m, n, k));
            accumulate(nodes, grads, *b, |gb| matmul_tn_acc(val(a), g, gb, m, k, n));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gi), bv) in ga.iter_mut().zip(g).zip(vb) {
                    *x += gi * bv;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((x, gi), av) in gb.iter_mut().zip(g).zip(va) {
                    *x += gi * av;
                }
            });
        }
        Op::Scale(x, f) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b)
            });
        }
        Op::AddBias(x, bias) => {
            let n = shape(bias)[0];
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            accumulate(nodes, grads, *bias, |gb| {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::Transpose(x) => {
            let (m, n) = rows_cols(shape(x)).expect("transpose input");
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
        }
        Op::Softmax { x, visible } => {
            let (m, n) = rows_cols(&node.shape).expect("softmax shape");
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    let k = visible.as_ref().map_or(n, |vis| vis[i]);
                    let yr = &y[i * n..i * n + k];
                    let gr = &g[i * n..i * n + k];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        gx[i * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let (m, n) = rows_cols(&node.shape).expect("log_softmax shape");
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] += gr[j] - y[i * n + j].exp() * total;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *a += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::LogSigmoid(x) => {
            let xv = val(x);
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += gi * sigmoid(-xi);
                }
            });
        }
        Op::Softplus(x) => {
            let xv = val(x);
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += gi * sigmoid(*xi);
                }
            });
        }
        Op::Tanh(x) => {
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *a += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(x);
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += gi * gelu_grad(*xi);
                }
            });
        }
        Op::Exp(x) => {
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for ((a, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *a += gi * yi;
                }
            });
        }
        Op::Gather { x, index } => {
            let n = shape(x)[1];
            accumulate(nodes, grads, *x, |gx| {
                for (i, &j) in index.iter().enumerate() {
                    gx[i * n + j] += g[i];
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
        }
        Op::Mean(x) => {
            let scale = g[0] / val(x).len() as f64;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|a| *a += scale));
        }
        Op::Embedding { table, ids } => {
            let d = shape(table)[1];
            accumulate(nodes, grads, *table, |gt| {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (m, d) = rows_cols(&node.shape).expect("layer_norm shape");
            let gv = val(gain);
            accumulate(nodes, grads, *gain, |gg| {
                for i in 0..m {
                    for j in 0..d {
                        gg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    let dxhat: Vec<f64> = (0..d).map(|j| g[i * d + j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat[i * d..(i + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        gx[i * d + j] += inv_std[i] * (dxhat[j] - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                    }
                }
            });
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for x in xs {
                let len = val(x).len();
                accumulate(nodes, grads, *x, |gx| {
                    gx.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                });
                offset += len;
            }
        }
        Op::ConcatCols(xs) => {
            let (m, total) = rows_cols(&node.shape).expect("concat_cols shape");
            let mut col = 0;
            for x in xs {
                let n = shape(x)[1];
                accumulate(nodes, grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * total + col + j];
                        }
                    }
                });
                col += n;
            }
        }
        Op::SliceRows { x, start } => {
            let n = shape(x)[1];
            let off = start * n;
            accumulate(nodes, grads, *x, |gx| {
                gx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
        }
        Op::SliceCols { x, start } => {
            let n = shape(x)[1];
            let (m, w) = rows_cols(&node.shape).expect("slice_cols shape");
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    for j in 0..w {
                        gx[i * n + start + j] += g[i * w + j];
                    }
                }
            });
        }
    }
}

/// Largest coordinate-wise relative error between the reverse-mode gradient
/// of `f` at `x` and a central finite difference with step `h`:
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(x.shape().to_vec(), data)?;
        let out = f(&mut g, input)?;
        let value = g.scalar(out);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut g = Graph::new();
    let input = g.param(x.shape().to_vec(), x.data().to_vec())?;
    let out = f(&mut g, input)?;
    if !g.scalar(out).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y) {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec![1], vec![0.0]).unwrap();
        let y = g.log_sigmoid(x).unwrap();
        assert!(approx(g.scalar(y), -std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let eye = g
            .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let data = vec![1.5, -2.0, 0.25, 3.0, 7.0, -1.0];
        let x = g.constant(vec![3, 2], data.clone()).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.param(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_squares_backward() {
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn empty_graph_rejected() {
        let g = Graph::new();
        assert_eq!(g.backward(Var(0)).unwrap_err(), TensorError::EmptyGraph);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(vec![1], vec![3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(vec![1], vec![1000.0]).unwrap();
        assert_eq!(g.exp(x).unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
        let err = grad_check(|g, _| g.constant(vec![1], vec![4.0]), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn masked_softmax_hides_columns() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let y = g.masked_softmax(x, vec![1, 2]).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert!(approx(v[3] + v[4], 1.0, 1e-15));
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            g.gather(x, vec![2]),
            Err(TensorError::IndexOutOfRange { op: "gather", .. })
        ));
    }

    #[test]
    fn tensor_new_validates_numel() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn populate_writes_grad_into_tensor() {
        let mut t = Tensor::vector(vec![1.0, -2.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        grads.populate(x, &mut t).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0][..]));
    }
}
