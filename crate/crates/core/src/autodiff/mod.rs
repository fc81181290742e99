//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once
//! in reverse and accumulates vector-Jacobian products into every node that
//! (transitively) depends on a parameter leaf.
//!
//! Non-differentiable points use fixed one-sided conventions: `relu'(0) = 0`,
//! `abs'(0) = 0`, and `max`/`min` ties route the gradient to the first
//! argument.

mod conv;

use std::fmt;

pub use conv::ConvGeometry;

use crate::error::{Error, Result};
use crate::nonlin::sigmoid;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation defined outside this module.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, shaped like that input.
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
    Clamp(T, T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Max,
    Min,
}

enum Op<T: Real> {
    Leaf,
    Unary(Var, Unary<T>),
    Binary(Var, Var, Binary),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Conv2dTranspose { y: Var, w: Var, geom: ConvGeometry },
    AddBias { x: Var, b: Var },
    BiasDot { x: Var, b: Var },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows { a: Var, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GatherCols { a: Var, idx: Vec<usize>, width: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(a, _) | Op::Sum(a) | Op::Mean(a) | Op::SumRows(a) | Op::Reshape(a) => vec![*a],
            Op::MaxRows { a, .. } | Op::GatherCols { a, .. } | Op::GatherRows { a, .. } => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Binary(a, b, _) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Conv2dTranspose { y, w, .. } => vec![*y, *w],
            Op::AddBias { x, b } | Op::BiasDot { x, b } => vec![*x, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dTranspose { .. } => "conv2d_transpose",
            Op::AddBias { .. } => "add_bias",
            Op::BiasDot { .. } => "bias_dot",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::GatherCols { .. } => "gather_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-owner computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    products: usize,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("products", &self.products)
            .finish()
    }
}

/// Gradients indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            products: 0,
            check_finite: false,
        }
    }

    /// Enables a NaN/Inf check on every recorded output.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of matrix products (matmul, conv, conv transpose) recorded.
    pub fn product_count(&self) -> usize {
        self.products
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `v`'s current value as a new constant, cutting the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    fn unary(&mut self, a: Var, kind: Unary<T>) -> Result<Var> {
        let zero = T::zero();
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Neg => Box::new(|x: T| -x),
            Unary::Scale(s) => Box::new(move |x| x * s),
            Unary::AddScalar(s) => Box::new(move |x| x + s),
            Unary::Relu => Box::new(move |x| if x > zero { x } else { zero }),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Tanh => Box::new(|x: T| x.tanh()),
            Unary::Exp => Box::new(|x: T| x.exp()),
            Unary::Log => Box::new(|x: T| x.ln()),
            Unary::Abs => Box::new(|x: T| x.abs()),
            Unary::Clamp(lo, hi) => Box::new(move |x: T| x.max(lo).min(hi)),
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary(a, kind))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Unary::AddScalar(s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes through on the
    /// closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
        }
        self.unary(a, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, op: &'static str) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => x.zip_map(y, |p, q| p + q),
            Binary::Sub => x.zip_map(y, |p, q| p - q),
            Binary::Mul => x.zip_map(y, |p, q| p * q),
            Binary::Max => x.zip_map(y, |p, q| if p >= q { p } else { q }),
            Binary::Min => x.zip_map(y, |p, q| if p <= q { p } else { q }),
        }
        .map_err(|_| Error::shape(op, x.shape(), y.shape()))?;
        self.push(value, Op::Binary(a, b, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max, "max")
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min, "min")
    }

    /// `op(a) * op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (xr, xc) = (x.shape()[0], x.shape()[1]);
        let (yr, yc) = (y.shape()[0], y.shape()[1]);
        let (m, k) = if ta { (xc, xr) } else { (xr, xc) };
        let (k2, n) = if tb { (yc, yr) } else { (yr, yc) };
        if k != k2 {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (rsa, csa) = if ta { (1, xc as isize) } else { (xc as isize, 1) };
        let (rsb, csb) = if tb { (1, yc as isize) } else { (yc as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, x.data(), rsa, csa, y.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
        self.products += 1;
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn check_conv(&self, op: &'static str, x: Var, w: Var, geom: &ConvGeometry, x_len: usize) -> Result<usize> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if !geom.is_valid() || ws != geom.weight_shape() || xs.is_empty() || xs[1..].iter().product::<usize>() != x_len {
            return Err(Error::shape(op, xs, ws));
        }
        Ok(xs[0])
    }

    /// Batched 2-D convolution without bias: `[B, C, H, W] -> [B, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let batch = self.check_conv("conv2d", x, w, &geom, geom.in_len())?;
        let out = conv::conv_forward(self.value(x).data(), self.value(w).data(), &geom, batch);
        self.products += 1;
        let shape = vec![batch, geom.out_channels, geom.out_h(), geom.out_w()];
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, geom })
    }

    /// Transpose of [`Graph::conv2d`] in its input: `[B, O, Ho, Wo] -> [B, C, H, W]`.
    pub fn conv2d_transpose(&mut self, y: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let batch = self.check_conv("conv2d_transpose", y, w, &geom, geom.out_len())?;
        let out = conv::conv_transpose(self.value(y).data(), self.value(w).data(), &geom, batch);
        self.products += 1;
        let shape = vec![batch, geom.in_channels, geom.in_h, geom.in_w];
        self.push(Tensor::new(shape, out)?, Op::Conv2dTranspose { y, w, geom })
    }

    fn bias_layout(&self, op: &'static str, x: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::shape(op, xs, bs));
        }
        Ok((xs[0], xs[1], xs[2..].iter().product()))
    }

    /// Adds a per-channel bias `[C]` to `[B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (batch, ch, inner) = self.bias_layout("add_bias", x, b)?;
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        let data = out.data_mut();
        for i in 0..batch {
            for c in 0..ch {
                let start = (i * ch + c) * inner;
                for v in &mut data[start..start + inner] {
                    *v = *v + bias[c];
                }
            }
        }
        self.push(out, Op::AddBias { x, b })
    }

    /// Per-row `sum_{c, s} x[i, c, s] * b[c]`: `[B, C, ...] x [C] -> [B]`.
    pub fn bias_dot(&mut self, x: Var, b: Var) -> Result<Var> {
        let (batch, ch, inner) = self.bias_layout("bias_dot", x, b)?;
        let (xv, bias) = (self.value(x).data(), self.value(b).data());
        let out: Vec<T> = (0..batch)
            .map(|i| {
                (0..ch)
                    .map(|c| {
                        let start = (i * ch + c) * inner;
                        xv[start..start + inner].iter().copied().sum::<T>() * bias[c]
                    })
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(out), Op::BiasDot { x, b })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidShape {
                op: "mean",
                detail: "mean of empty tensor".into(),
            });
        }
        let s = t.sum() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums every non-leading axis: `[B, ...] -> [B]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<T> = (0..t.rows()).map(|i| t.row(i).iter().copied().sum()).collect();
        self.push(Tensor::vector(out), Op::SumRows(a))
    }

    /// Row maximum over every non-leading axis; ties pick the first index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.row_len() == 0 {
            return Err(Error::InvalidShape {
                op: "max_rows",
                detail: "rows are empty".into(),
            });
        }
        let mut argmax = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        self.push(Tensor::vector(out), Op::MaxRows { a, argmax })
    }

    /// Per-row cross-entropy of softmax(logits) against integer labels:
    /// `[B, C] -> [B]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            out.push(lse - row[y]);
        }
        self.push(
            Tensor::vector(out),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Picks `idx.len() / B` columns per row of a 2-D tensor.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        if t.shape().len() != 2 || rows == 0 || idx.len() % rows != 0 {
            return Err(Error::shape("gather_cols", t.shape(), &[idx.len()]));
        }
        let (n, width) = (t.shape()[1], idx.len() / rows);
        if idx.iter().any(|&j| j >= n) {
            return Err(Error::InvalidArgument("gather_cols index out of range".into()));
        }
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| t.data()[(p / width) * n + j])
            .collect();
        self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
                width,
            },
        )
    }

    /// Gathers leading-axis rows (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::InvalidArgument("gather_rows index out of range".into()));
        }
        let out = t.select_rows(idx);
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// Concatenates along axis 1. Parts are `[B]` (treated as `[B, 1]`) or
    /// `[B, ...]` (flattened per row).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat", self.shape(*first), self.shape(p)));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).row_len()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(vec![rows, width], out)?, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    /// Flattens to `[B, row_len]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        if t.shape() == shape {
            return Ok(a);
        }
        self.reshape(a, &shape)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(a, kind) => {
                if !self.wants(*a) {
                    return;
                }
                let x = self.value(*a);
                let y = &node.value;
                let mut out = g.clone();
                let d = out.data_mut();
                for i in 0..d.len() {
                    let (xi, yi) = (x.data()[i], y.data()[i]);
                    let local = match *kind {
                        Unary::Neg => -one,
                        Unary::Scale(s) => s,
                        Unary::AddScalar(_) => one,
                        Unary::Relu => {
                            if xi > zero {
                                one
                            } else {
                                zero
                            }
                        }
                        Unary::Sigmoid => yi * (one - yi),
                        Unary::Tanh => one - yi * yi,
                        Unary::Exp => yi,
                        Unary::Log => one / xi,
                        Unary::Abs => {
                            if xi > zero {
                                one
                            } else if xi < zero {
                                -one
                            } else {
                                zero
                            }
                        }
                        Unary::Clamp(lo, hi) => {
                            if xi >= lo && xi <= hi {
                                one
                            } else {
                                zero
                            }
                        }
                    };
                    d[i] = d[i] * local;
                }
                accumulate(grads, *a, out);
            }
            Op::Binary(a, b, kind) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let pick = |first: bool| -> Tensor<T> {
                    let mut out = g.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        let (p, q) = (x.data()[i], y.data()[i]);
                        let to_first = match kind {
                            Binary::Max => p >= q,
                            _ => p <= q,
                        };
                        if to_first != first {
                            *v = zero;
                        }
                    }
                    out
                };
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (
                        g.zip_map(y, |p, q| p * q).expect("shapes checked"),
                        g.zip_map(x, |p, q| p * q).expect("shapes checked"),
                    ),
                    Binary::Max | Binary::Min => (pick(true), pick(false)),
                };
                if self.wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (xr, xc) = (x.shape()[0], x.shape()[1]);
                let (yr, yc) = (y.shape()[0], y.shape()[1]);
                let (m, k) = if *ta { (xc, xr) } else { (xr, xc) };
                let n = if *tb { yr } else { yc };
                // op(B) viewed as [k, n]
                let (rsb, csb) = if *tb { (1, yc as isize) } else { (yc as isize, 1) };
                // op(A) viewed as [m, k]
                let (rsa, csa) = if *ta { (1, xc as isize) } else { (xc as isize, 1) };
                let gd = g.data();
                if self.wants(*a) {
                    let mut out = vec![zero; xr * xc];
                    if !*ta {
                        // dA = dC op(B)^T : [m, n] x [n, k]
                        T::gemm(m, n, k, gd, n as isize, 1, y.data(), csb, rsb, zero, &mut out, k as isize, 1);
                    } else {
                        // dA (stored [k, m]) = op(B) dC^T : [k, n] x [n, m]
                        T::gemm(k, n, m, y.data(), rsb, csb, gd, 1, n as isize, zero, &mut out, m as isize, 1);
                    }
                    accumulate(grads, *a, Tensor::new(vec![xr, xc], out).expect("matmul grad shape"));
                }
                if self.wants(*b) {
                    let mut out = vec![zero; yr * yc];
                    if !*tb {
                        // dB = op(A)^T dC : [k, m] x [m, n]
                        T::gemm(k, m, n, x.data(), csa, rsa, gd, n as isize, 1, zero, &mut out, n as isize, 1);
                    } else {
                        // dB (stored [n, k]) = dC^T op(A) : [n, m] x [m, k]
                        T::gemm(n, m, k, gd, 1, n as isize, x.data(), rsa, csa, zero, &mut out, k as isize, 1);
                    }
                    accumulate(grads, *b, Tensor::new(vec![yr, yc], out).expect("matmul grad shape"));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xv = self.value(*x);
                let batch = xv.rows();
                if self.wants(*x) {
                    let gx = conv::conv_transpose(g.data(), self.value(*w).data(), geom, batch);
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("conv grad"));
                }
                if self.wants(*w) {
                    let gw = conv::conv_weight_grad(g.data(), xv.data(), geom, batch);
                    accumulate(grads, *w, Tensor::new(geom.weight_shape().to_vec(), gw).expect("conv grad"));
                }
            }
            Op::Conv2dTranspose { y, w, geom } => {
                let yv = self.value(*y);
                let batch = yv.rows();
                if self.wants(*y) {
                    let gy = conv::conv_forward(g.data(), self.value(*w).data(), geom, batch);
                    accumulate(grads, *y, Tensor::new(yv.shape().to_vec(), gy).expect("conv grad"));
                }
                if self.wants(*w) {
                    let gw = conv::conv_weight_grad(yv.data(), g.data(), geom, batch);
                    accumulate(grads, *w, Tensor::new(geom.weight_shape().to_vec(), gw).expect("conv grad"));
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let (batch, ch, inner) = self.bias_layout("add_bias", *x, *b).expect("checked");
                    let mut gb = vec![zero; ch];
                    for i in 0..batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let start = (i * ch + c) * inner;
                            *acc = *acc + g.data()[start..start + inner].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *b, Tensor::vector(gb));
                }
            }
            Op::BiasDot { x, b } => {
                let (batch, ch, inner) = self.bias_layout("bias_dot", *x, *b).expect("checked");
                let (xv, bias) = (self.value(*x), self.value(*b));
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape().to_vec());
                    let d = gx.data_mut();
                    for i in 0..batch {
                        for c in 0..ch {
                            let start = (i * ch + c) * inner;
                            let v = g.data()[i] * bias.data()[c];
                            d[start..start + inner].iter_mut().for_each(|e| *e = v);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*b) {
                    let mut gb = vec![zero; ch];
                    for i in 0..batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let start = (i * ch + c) * inner;
                            let s: T = xv.data()[start..start + inner].iter().copied().sum();
                            *acc = *acc + g.data()[i] * s;
                        }
                    }
                    accumulate(grads, *b, Tensor::vector(gb));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(grads, *a, Tensor::full(shape, g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let t = self.value(*a);
                    let v = g.item() / T::of(t.len() as f64);
                    accumulate(grads, *a, Tensor::full(t.shape().to_vec(), v));
                }
            }
            Op::SumRows(a) => {
                if self.wants(*a) {
                    let t = self.value(*a);
                    let w = t.row_len();
                    let data = (0..t.len()).map(|i| g.data()[i / w.max(1)]).collect();
                    accumulate(grads, *a, Tensor::new(t.shape().to_vec(), data).expect("sum_rows grad"));
                }
            }
            Op::MaxRows { a, argmax } => {
                if self.wants(*a) {
                    let t = self.value(*a);
                    let w = t.row_len();
                    let mut out = Tensor::zeros(t.shape().to_vec());
                    for (i, &j) in argmax.iter().enumerate() {
                        out.data_mut()[i * w + j] = g.data()[i];
                    }
                    accumulate(grads, *a, out);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let t = self.value(*logits);
                    let c = t.shape()[1];
                    let mut out = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        out[i * c + y] = out[i * c + y] - one;
                        for v in &mut out[i * c..(i + 1) * c] {
                            *v = *v * g.data()[i];
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), out).expect("ce grad"));
                }
            }
            Op::GatherCols { a, idx, width } => {
                if self.wants(*a) {
                    let t = self.value(*a);
                    let n = t.shape()[1];
                    let mut out = Tensor::zeros(t.shape().to_vec());
                    let d = out.data_mut();
                    for (p, &j) in idx.iter().enumerate() {
                        let k = (p / width) * n + j;
                        d[k] = d[k] + g.data()[p];
                    }
                    accumulate(grads, *a, out);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.wants(*a) {
                    let t = self.value(*a);
                    let w = t.row_len();
                    let mut out = Tensor::zeros(t.shape().to_vec());
                    let d = out.data_mut();
                    for (p, &i) in idx.iter().enumerate() {
                        for q in 0..w {
                            d[i * w + q] = d[i * w + q] + g.data()[p * w + q];
                        }
                    }
                    accumulate(grads, *a, out);
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.row_len();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(t.len());
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * width + offset..i * width + offset + w]);
                        }
                        accumulate(grads, p, Tensor::new(t.shape().to_vec(), data).expect("concat grad"));
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(grads, *a, g.clone().reshape(shape).expect("reshape grad"));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(g, &vals, &node.value);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        if self.wants(v) {
                            debug_assert_eq!(gv.shape(), self.shape(v), "{} gradient shape", op.name());
                            accumulate(grads, v, gv);
                        }
                    }
                }
            }
        }
    }
}
