//! Dense tensors and a tape-style reverse-mode automatic differentiation graph.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a node whose
//! parents already exist, so node order is a topological order and [`Graph::backward`]
//! is a single reverse sweep. Graphs are cheap to build and are rebuilt every training
//! step; parameters live outside the graph as plain [`Tensor`]s and are registered as
//! leaves with [`Graph::param`].
//!
//! Fused kernels that are too slow to express through elementwise primitives (KAN
//! layers, STFT magnitudes, 1-D convolutions) plug in through the [`Function`] trait.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one value");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// First value; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) || shape.is_empty() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floating-point mode of a graph.
///
/// `F32` rounds every node value through `f32`, reproducing single-precision storage.
/// Arithmetic inside an operation still runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Relu,
    Silu,
    Negate,
    Scale(f64),
    Shift(f64),
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Relu => "relu",
            UnaryOp::Silu => "silu",
            UnaryOp::Negate => "negate",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Shift(_) => "shift",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Negate => -x,
            UnaryOp::Scale(a) => a * x,
            UnaryOp::Shift(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            // sqrt'(0) is taken as 0 so that norms of exactly-zero residuals stay finite.
            UnaryOp::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Silu => silu_grad(x),
            UnaryOp::Negate => -1.0,
            UnaryOp::Scale(a) => a,
            UnaryOp::Shift(_) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Backward rule of a fused operation whose forward value was computed by the caller.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Constant,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reduce(Reduction, Var, Option<usize>),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Custom(Vec<Var>, Box<dyn Function>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to every parameter leaf of a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, mut value: Tensor, op: Op, tracked: bool, name: &str) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable leaf. Its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "param")
            .expect("parameter tensors must be finite")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false, "constant")
            .expect("constant tensors must be finite")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        match op {
            UnaryOp::Log => {
                if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
            }
            UnaryOp::Sqrt => {
                if let Some(bad) = x.data.iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                }
            }
            _ => {}
        }
        let out = x.map(|v| op.apply(v));
        let tracked = self.is_tracked(a);
        self.push(out, Op::Unary(op, a), tracked, op.name())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Cos, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, a)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Negate, a)
    }
    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(alpha), a)
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Shift(c), a)
    }

    /// Elementwise binary operation. `b` must have the same shape as `a` or match
    /// `a`'s trailing dimensions (bias-style broadcast).
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcastable(va.shape(), vb.shape()) {
            return Err(Error::Shape(format!(
                "cannot combine {:?} with {:?}: shapes must match or broadcast over trailing axes",
                va.shape(),
                vb.shape()
            )));
        }
        if op == BinaryOp::Div && vb.data.contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let nb = vb.len();
        let data: Vec<f64> = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = vb.data[i % nb];
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        self.push(out, Op::Binary(op, a, b), tracked, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&va.data, &vb.data, &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            tracked,
            "matmul",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let out = transpose_data(&va.data, r, c);
        let tracked = self.is_tracked(a);
        self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(a),
            tracked,
            "transpose",
        )
    }

    /// Sum or mean over all values (`axis = None`, result shape `[1]`) or over one axis.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let out = match axis {
            None => {
                let s: f64 = va.data.iter().sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / va.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= va.rank() {
                    return Err(Error::Shape(format!(
                        "axis {ax} out of range for shape {:?}",
                        va.shape()
                    )));
                }
                let (outer, n, inner) = axis_split(va.shape(), ax);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &va.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut data[o * inner..(o + 1) * inner];
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    for d in data.iter_mut() {
                        *d /= n as f64;
                    }
                }
                let mut shape: Vec<usize> = va.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor { shape, data }
            }
        };
        let tracked = self.is_tracked(a);
        self.push(out, Op::Reduce(kind, a, axis), tracked, "reduce")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let tracked = self.is_tracked(a);
        self.push(out, Op::Reshape(a), tracked, "reshape")
    }

    /// Contiguous run of the flattened values of `a`, starting at `offset`, viewed as `shape`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if offset + n > va.len() {
            return Err(Error::Shape(format!(
                "slice [{offset}, {}) out of range for {} values",
                offset + n,
                va.len()
            )));
        }
        let out = Tensor::new(shape.to_vec(), va.data[offset..offset + n].to_vec())?;
        let tracked = self.is_tracked(a);
        self.push(out, Op::Slice(a, offset), tracked, "slice")
    }

    /// Concatenates the flattened values of the inputs into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        self.push(
            Tensor::from_vec(data),
            Op::Concat(parts.to_vec()),
            tracked,
            "concat",
        )
    }

    /// Records a fused operation whose forward `output` was computed by the caller.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor, f: impl Function + 'static) -> Result<Var> {
        let tracked = inputs.iter().any(|&v| self.is_tracked(v));
        let name = f.name();
        self.push(output, Op::Custom(inputs.to_vec(), Box::new(f)), tracked, name)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The graph is not modified, so calling this twice returns identical gradients.
    /// Every parameter leaf receives a gradient; leaves that do not influence `loss`
    /// receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        let mut grads = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    grads.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads.grads.insert(
                        Var(i),
                        Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        },
                    );
                }
                Op::Constant => {}
                Op::Unary(op, a) => {
                    let x = &self.nodes[a.0].value.data;
                    let y = &node.value.data;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gi, (&xi, &yi))| gi * op.derivative(xi, yi))
                        .collect();
                    self.accumulate(&mut adj, *a, d);
                }
                Op::Binary(op, a, b) => {
                    let xa = &self.nodes[a.0].value.data;
                    let xb = &self.nodes[b.0].value.data;
                    let nb = xb.len();
                    if self.nodes[a.0].tracked {
                        let d: Vec<f64> = match op {
                            BinaryOp::Add | BinaryOp::Sub => g.clone(),
                            BinaryOp::Mul => g.iter().enumerate().map(|(j, &gi)| gi * xb[j % nb]).collect(),
                            BinaryOp::Div => g.iter().enumerate().map(|(j, &gi)| gi / xb[j % nb]).collect(),
                        };
                        self.accumulate(&mut adj, *a, d);
                    }
                    if self.nodes[b.0].tracked {
                        let mut d = vec![0.0; nb];
                        for (j, &gi) in g.iter().enumerate() {
                            let k = j % nb;
                            d[k] += match op {
                                BinaryOp::Add => gi,
                                BinaryOp::Sub => -gi,
                                BinaryOp::Mul => gi * xa[j],
                                BinaryOp::Div => -gi * xa[j] / (xb[k] * xb[k]),
                            };
                        }
                        self.accumulate(&mut adj, *b, d);
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    if self.nodes[a.0].tracked {
                        // dA = dC · Bᵀ
                        let mut d = vec![0.0; m * k];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &vb.data[p * n..(p + 1) * n];
                                d[r * k + p] = dot(grow, brow);
                            }
                        }
                        self.accumulate(&mut adj, *a, d);
                    }
                    if self.nodes[b.0].tracked {
                        // dB = Aᵀ · dC
                        let mut d = vec![0.0; k * n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let s = va.data[r * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[p * n..(p + 1) * n];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += s * gv;
                                }
                            }
                        }
                        self.accumulate(&mut adj, *b, d);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape[0], node.value.shape[1]);
                    self.accumulate(&mut adj, *a, transpose_data(&g, r, c));
                }
                Op::Reduce(kind, a, axis) => {
                    let src = &self.nodes[a.0].value;
                    let d = match axis {
                        None => {
                            let s = match kind {
                                Reduction::Sum => g[0],
                                Reduction::Mean => g[0] / src.len() as f64,
                            };
                            vec![s; src.len()]
                        }
                        Some(ax) => {
                            let (outer, n, inner) = axis_split(src.shape(), *ax);
                            let f = match kind {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => 1.0 / n as f64,
                            };
                            let mut d = vec![0.0; src.len()];
                            for o in 0..outer {
                                for j in 0..n {
                                    for t in 0..inner {
                                        d[(o * n + j) * inner + t] = g[o * inner + t] * f;
                                    }
                                }
                            }
                            d
                        }
                    };
                    self.accumulate(&mut adj, *a, d);
                }
                Op::Reshape(a) => self.accumulate(&mut adj, *a, g),
                Op::Slice(a, offset) => {
                    let mut d = vec![0.0; self.nodes[a.0].value.len()];
                    d[*offset..*offset + g.len()].copy_from_slice(&g);
                    self.accumulate(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.nodes[p.0].tracked {
                            self.accumulate(&mut adj, p, g[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::Custom(inputs, f) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
                    let gt = Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    };
                    let res = f.backward(&vals, &node.value, &gt, &needs);
                    for ((&v, need), d) in inputs.iter().zip(&needs).zip(res) {
                        if !need {
                            continue;
                        }
                        if let Some(d) = d {
                            debug_assert_eq!(d.len(), self.nodes[v.0].value.len(), "{}", f.name());
                            self.accumulate(&mut adj, v, d.data);
                        }
                    }
                }
            }
        }
        // leaves created after the loss node cannot influence it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                grads.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    b.len() < a.len() && a.ends_with(b)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a[m×k] · b[k×n]`, row-major.
///
/// Full 4×8 output tiles accumulate in registers over the whole `k` loop; edges fall
/// back to row-by-row updates. Each output element sums its `k` products in index
/// order, so results do not depend on the tiling.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
    }
    let edge = |i: usize, j_lo: usize, out: &mut [f64]| {
        let orow = &mut out[i * n + j_lo..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n + j_lo..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    };
    if n_full < n {
        for i in 0..m_full {
            edge(i, n_full, out);
        }
    }
    for i in m_full..m {
        edge(i, 0, out);
    }
}

pub(crate) fn transpose_data(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per input tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    /// Denominator floor of the relative error, at the rounding-noise level of the
    /// central difference.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            coords_per_tensor: Some(10),
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of a scalar function against central differences
/// `(f(x+h) − f(x−h)) / 2h`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`; the report holds
/// the worst one. Mismatches are reported, never raised.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every input is a leaf");
        let n = inputs[ti].len();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(c) if c < n => (0..c).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[ti].data[c];
            work[ti].data[c] = orig + opts.step;
            let fp = eval(&work)?;
            work[ti].data[c] = orig - opts.step;
            let fm = eval(&work)?;
            work[ti].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t2(2, 1, &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let a = random(&[3, 3], 1);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let id = g.constant(t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(va, id).unwrap();
        assert_eq!(g.value(c), &a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_is_column_sums_of_b() {
        let a = random(&[3, 4], 2);
        let b = random(&[4, 5], 3);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        let ga = grads.get(va).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let colsum: f64 = b.data()[p * 5..(p + 1) * 5].iter().sum();
                assert!((ga.data()[i * 4 + p] - colsum).abs() < 1e-14);
            }
        }
        let report = grad_check(
            |g, xs| {
                let c = g.matmul(xs[0], xs[1])?;
                g.sum(c)
            },
            &[a, b],
            &GradCheck {
                coords_per_tensor: None,
                floor: 1e-8,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn silu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let y = g.silu(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        // 1 / (1 + e^-1)
        assert!((g.value(y).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn sin_symmetry_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![
            0.0,
            std::f64::consts::FRAC_PI_2,
            std::f64::consts::PI,
        ]));
        let y = g.sin(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!(v[2].abs() < 1e-15);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.div(a, b), Err(Error::Domain(_))));
    }

    #[test]
    fn add_and_self_cancellation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let z = g.sub(c, c).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn only_trailing_broadcast_is_allowed() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let bias = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.add(a, bias).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let bad = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn product_rule_matches_finite_difference() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        let h: f64 = 1e-6;
        let fd = ((2.0 + h) * 3.0 - (2.0 - h) * 3.0) / (2.0 * h);
        assert!((fd - 3.0).abs() < 1e-8);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item(), 10.0);
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);

        let c = g.constant(Tensor::full(&[5], 2.5));
        let mc = g.mean(c).unwrap();
        assert_eq!(g.value(mc).item(), 2.5);

        let m2 = g.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r0 = g.reduce(Reduction::Sum, m2, Some(0)).unwrap();
        assert_eq!(g.value(r0).data(), &[5.0, 7.0, 9.0]);
        let r1 = g.reduce(Reduction::Mean, m2, Some(1)).unwrap();
        assert_eq!(g.value(r1).data(), &[2.0, 5.0]);
        assert!(matches!(
            g.reduce(Reduction::Sum, m2, Some(2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sin_times_x_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sin(x).unwrap();
        let y = g.mul(s, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.7));
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut g = Graph::new();
        let x = g.param(random(&[4], 9));
        let y = g.sin(x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0, -2.0, 2.0]));
        let y = g.abs(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradcheck() {
        let report = grad_check(
            |g, xs| {
                let s = g.square(xs[0])?;
                g.sum(s)
            },
            &[random(&[20], 4)],
            &GradCheck {
                coords_per_tensor: None,
                floor: 1e-12,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_gradcheck_is_exact() {
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[random(&[5], 5)],
            &GradCheck::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn every_unary_op_matches_finite_differences() {
        let ops = [
            UnaryOp::Sin,
            UnaryOp::Cos,
            UnaryOp::Exp,
            UnaryOp::Log,
            UnaryOp::Abs,
            UnaryOp::Square,
            UnaryOp::Sqrt,
            UnaryOp::Relu,
            UnaryOp::Silu,
            UnaryOp::Negate,
            UnaryOp::Scale(-1.7),
            UnaryOp::Shift(0.3),
        ];
        for (i, op) in ops.into_iter().enumerate() {
            let mut x = random(&[100], 100 + i as u64);
            if matches!(op, UnaryOp::Log | UnaryOp::Sqrt) {
                x = x.map(|v| v.abs() + 0.1);
            }
            let report = grad_check(
                move |g, xs| {
                    let y = g.unary(op, xs[0])?;
                    g.sum(y)
                },
                &[x],
                &GradCheck {
                    coords_per_tensor: None,
                    ..GradCheck::default()
                },
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{op:?}: {report:?}");
        }
    }

    #[test]
    fn every_binary_op_matches_finite_differences() {
        for (i, op) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div]
            .into_iter()
            .enumerate()
        {
            let a = random(&[10, 10], 200 + i as u64);
            let b = random(&[10], 300 + i as u64).map(|v| v.signum() * (v.abs() + 0.5));
            let report = grad_check(
                move |g, xs| {
                    let y = g.binary(op, xs[0], xs[1])?;
                    let y = g.sin(y)?;
                    g.sum(y)
                },
                &[a, b],
                &GradCheck {
                    coords_per_tensor: None,
                    ..GradCheck::default()
                },
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{op:?}: {report:?}");
        }
    }

    #[test]
    fn structural_ops_gradcheck() {
        let report = grad_check(
            |g, xs| {
                let t = g.transpose(xs[0])?;
                let r = g.reshape(t, &[12])?;
                let s = g.slice(r, 2, &[5])?;
                let c = g.concat(&[s, xs[1]])?;
                let m = g.reduce(Reduction::Mean, xs[0], Some(1))?;
                let c2 = g.concat(&[c, m])?;
                let sq = g.square(c2)?;
                g.sum(sq)
            },
            &[random(&[3, 4], 11), random(&[3], 12)],
            &GradCheck {
                coords_per_tensor: None,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        assert_eq!(g.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let a = g.param(random(&[8, 8], 21));
            let b = g.param(random(&[8, 3], 22));
            let c = g.matmul(a, b).unwrap();
            let d = g.silu(c).unwrap();
            let s = g.sum(d).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads.get(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
