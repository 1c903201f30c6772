//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its value; [`Graph::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order because a node can
//! only reference nodes created before it. Node values are never mutated after recording.

use std::f64::consts::TAU;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    BatchMatMul,
    Conv2d,
    BatchNorm,
    LeakyRelu,
    Sigmoid,
    Exp,
    Ln,
    Log2,
    Sqrt,
    Square,
    Cos,
    Sin,
    ClampMin,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis,
    Scale,
    AddScalar,
    Reshape,
    Concat,
    PhaseQuantize,
}

/// How phase-quantizer nodes behave in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StePolicy {
    /// Forward applies the hard staircase; backward uses the linear surrogate.
    #[default]
    Quantize,
    /// Forward uses the surrogate `t ↦ 2πt` too, making the graph smooth end to end.
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with supplied running statistics.
    Inference,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub eps: f64,
    pub mode: BatchNormMode,
}

enum Op {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    MatMul { m: usize, k: usize, n: usize },
    BatchMatMul { batch: usize, m: usize, k: usize, n: usize },
    Conv2d { geom: ConvGeometry, cols: Vec<f64> },
    BatchNorm(Box<BnCache>),
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Ln,
    Log2,
    Sqrt,
    Square,
    Cos,
    Sin,
    ClampMin(f64),
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis { outer: usize, len: usize, inner: usize },
    Scale(f64),
    AddScalar,
    Reshape,
    Concat { outer: usize, widths: Vec<usize> },
    PhaseQuantize { bits: Option<u32> },
}

struct BnCache {
    mode: BatchNormMode,
    channels: usize,
    inner: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Parameter => OpKind::Parameter,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::LeakyRelu(_) => OpKind::LeakyRelu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Exp => OpKind::Exp,
            Op::Ln => OpKind::Ln,
            Op::Log2 => OpKind::Log2,
            Op::Sqrt => OpKind::Sqrt,
            Op::Square => OpKind::Square,
            Op::Cos => OpKind::Cos,
            Op::Sin => OpKind::Sin,
            Op::ClampMin(_) => OpKind::ClampMin,
            Op::Softmax => OpKind::Softmax,
            Op::LogSoftmax => OpKind::LogSoftmax,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Reshape => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::PhaseQuantize { .. } => OpKind::PhaseQuantize,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if `var` does not influence it.
    pub fn get(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ste: StePolicy,
}

fn numeric(op: &str, what: &str) -> Error {
    Error::Numeric(format!("{op}: {what}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ste_policy(ste: StePolicy) -> Self {
        Self {
            nodes: Vec::new(),
            ste,
        }
    }

    pub fn ste_policy(&self) -> StePolicy {
        self.ste
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].inputs
    }

    /// True if any recorded phase quantizer applied its hard staircase in the forward pass.
    pub fn has_hard_quantizer(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::PhaseQuantize { bits: Some(_) }) && self.ste == StePolicy::Quantize)
    }

    /// Batch statistics (mean, biased variance) computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, var: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[var.0].op {
            Op::BatchNorm(c) if c.mode == BatchNormMode::Train => {
                Some((&c.batch_mean, &c.batch_var))
            }
            _ => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(numeric(&format!("{:?}", op.kind()), "non-finite result"));
        }
        let needs_grad = matches!(op, Op::Parameter) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, vec![], value)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf whose gradient is tracked.
    pub fn parameter(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Parameter, vec![], value)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let data = kernels::binary_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, f);
        let value = Tensor::new(&shape, data)?;
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(numeric("div", "division by zero"));
        }
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::Dimension(format!("matmul {sa:?} × {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push(Op::MatMul { m, k, n }, vec![a, b], value)
    }

    /// `[B, m, k] × [B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = match (ta.shape(), tb.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => {
                return Err(Error::Dimension(format!("batch_matmul {sa:?} × {sb:?}")));
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..][..m * k],
                false,
                &tb.data()[i * k * n..][..k * n],
                false,
                &mut out[i * m * n..][..m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push(Op::BatchMatMul { batch, m, k, n }, vec![a, b], value)
    }

    /// Stride-1 2D convolution with odd square kernels and zero padding that preserves
    /// the spatial size. `x: [B, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let geom = match (tx.shape(), tw.shape(), tb.shape()) {
            (&[batch, c, height, width], &[o, c2, k, k2], &[o2])
                if c == c2 && k == k2 && o == o2 && k % 2 == 1 =>
            {
                ConvGeometry {
                    batch,
                    in_channels: c,
                    out_channels: o,
                    height,
                    width,
                    kernel: k,
                }
            }
            (sx, sw, sb) => {
                return Err(Error::Dimension(format!(
                    "conv2d input {sx:?}, weight {sw:?}, bias {sb:?}"
                )));
            }
        };
        let cols = kernels::im2col(tx.data(), &geom);
        let (rows, patch, o) = (geom.rows(), geom.patch(), geom.out_channels);
        let mut out_rows = vec![0.0; rows * o];
        kernels::gemm(rows, patch, o, &cols, false, tw.data(), true, &mut out_rows, false);
        let hw = geom.height * geom.width;
        let mut out = vec![0.0; rows * o];
        for b in 0..geom.batch {
            for p in 0..hw {
                let src = &out_rows[(b * hw + p) * o..][..o];
                for (oc, v) in src.iter().enumerate() {
                    out[(b * o + oc) * hw + p] = v + tb.data()[oc];
                }
            }
        }
        let value = Tensor::new(&[geom.batch, o, geom.height, geom.width], out)?;
        self.push(Op::Conv2d { geom, cols }, vec![x, weight, bias], value)
    }

    /// Per-channel normalization of `x: [B, C, ...]` followed by the affine map
    /// `gamma · x̂ + beta`. In inference mode `running` supplies (mean, variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        params: BatchNormParams,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("batch_norm input {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [channels] || tb.shape() != [channels] {
            return Err(Error::Dimension(format!(
                "batch_norm affine params {:?}/{:?} for {channels} channels",
                tg.shape(),
                tb.shape()
            )));
        }
        let count = (batch * inner) as f64;
        let data = tx.data();
        let (mean, var) = match params.mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        for v in &data[(b * channels + c) * inner..][..inner] {
                            mean[c] += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..batch {
                    for c in 0..channels {
                        for v in &data[(b * channels + c) * inner..][..inner] {
                            var[c] += (v - mean[c]).powi(2);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
            BatchNormMode::Inference => {
                let (m, v) = running.ok_or_else(|| {
                    Error::Contract("inference batch_norm needs running statistics".into())
                })?;
                if m.len() != channels || v.len() != channels {
                    return Err(Error::Dimension("running statistics length".into()));
                }
                (m.to_vec(), v.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (data[i] - mean[c]) * inv_std[c];
                    out[i] = tg.data()[c] * xhat[i] + tb.data()[c];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let cache = BnCache {
            mode: params.mode,
            channels,
            inner,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        };
        self.push(Op::BatchNorm(Box::new(cache)), vec![x, gamma, beta], value)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(slope), x, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(numeric("ln", "non-positive argument"));
        }
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn log2(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(numeric("log2", "non-positive argument"));
        }
        self.unary(Op::Log2, x, f64::log2)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(numeric("sqrt", "non-positive argument"));
        }
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Cos, x, f64::cos)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sin, x, f64::sin)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(Op::ClampMin(floor), x, |v| v.max(floor))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(Op::Scale(factor), x, |v| v * factor)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    fn last_axis_rows(&self, x: Var) -> (usize, usize) {
        let shape = self.shape(x);
        let len = *shape.last().unwrap();
        (self.value(x).numel() / len, len)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, len) = self.last_axis_rows(x);
        let tx = self.value(x);
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * len..][..len];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * len..][..len];
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push(Op::Softmax, vec![x], value)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, len) = self.last_axis_rows(x);
        let tx = self.value(x);
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * len..][..len];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            for (d, s) in out[r * len..][..len].iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push(Op::LogSoftmax, vec![x], value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean, vec![x], value)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("sum_axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(Op::SumAxis { outer, len, inner }, vec![x], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// Collapse everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let rest: usize = shape[1..].iter().product();
        let b = shape[0];
        self.reshape(x, &[b, rest])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} of {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::Dimension(format!("concat {base:?} with {s:?}")));
            }
            widths.push(s[axis] * inner);
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[o * w..][..w]);
            }
        }
        let mut shape = base;
        shape[axis] = row / inner;
        let value = Tensor::new(&shape, out)?;
        self.push(Op::Concat { outer, widths }, xs.to_vec(), value)
    }

    /// Straight-through phase quantizer for `t ∈ [0, 1]`.
    ///
    /// Forward: `2π⌈t·2^q⌉/2^q` (or `2πt` for continuous phases, or under
    /// [`StePolicy::Surrogate`]). Backward: always the derivative of `2πt`.
    pub fn phase_quantize(&mut self, t: Var, bits: Option<u32>) -> Result<Var> {
        if self
            .value(t)
            .data()
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Parameter("phase_quantize input outside [0, 1]".into()));
        }
        let hard = match (bits, self.ste) {
            (Some(q), StePolicy::Quantize) => Some(q),
            _ => None,
        };
        self.unary(Op::PhaseQuantize { bits }, t, move |v| match hard {
            Some(q) => crate::precoding::quantize_unit(v, q),
            None => TAU * v,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.needs_grad {
                let contributions = self.node_backward(node, &grad)?;
                for (input, g) in node.inputs.iter().zip(contributions) {
                    let Some(g) = g else { continue };
                    if !self.nodes[input.0].needs_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        // Only leaves need to be kept; intermediate gradients are discarded.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Parameter) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data();
        let x = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape(), data);
        let unary = |f: &dyn Fn(f64, f64, f64) -> f64| -> Result<Vec<Option<Tensor>>> {
            let xi = x(0);
            let data = g
                .iter()
                .zip(xi.data())
                .zip(y.data())
                .map(|((&g, &xv), &yv)| f(g, xv, yv))
                .collect();
            Ok(vec![Some(like(xi, data)?)])
        };
        let binary = |f: &dyn Fn(f64, f64, f64) -> (f64, f64)| -> Result<Vec<Option<Tensor>>> {
            let (a, b) = (x(0), x(1));
            let (ga, gb) = kernels::binary_broadcast_backward(
                g,
                a.data(),
                a.shape(),
                b.data(),
                b.shape(),
                y.shape(),
                f,
            );
            Ok(vec![Some(like(a, ga)?), Some(like(b, gb)?)])
        };
        match &node.op {
            Op::Constant | Op::Parameter => Ok(vec![]),
            Op::Add => binary(&|g, _, _| (g, g)),
            Op::Sub => binary(&|g, _, _| (g, -g)),
            Op::Mul => binary(&|g, a, b| (g * b, g * a)),
            Op::Div => binary(&|g, a, b| (g / b, -g * a / (b * b))),
            Op::MatMul { m, k, n } => {
                let (a, b) = (x(0), x(1));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                kernels::gemm(*m, *n, *k, g, false, b.data(), true, &mut ga, false);
                kernels::gemm(*k, *m, *n, a.data(), true, g, false, &mut gb, false);
                Ok(vec![Some(like(a, ga)?), Some(like(b, gb)?)])
            }
            Op::BatchMatMul { batch, m, k, n } => {
                let (a, b) = (x(0), x(1));
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..*batch {
                    let gi = &g[i * m * n..][..m * n];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &b.data()[i * k * n..][..k * n],
                        true,
                        &mut ga[i * m * k..][..m * k],
                        false,
                    );
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..][..m * k],
                        true,
                        gi,
                        false,
                        &mut gb[i * k * n..][..k * n],
                        false,
                    );
                }
                Ok(vec![Some(like(a, ga)?), Some(like(b, gb)?)])
            }
            Op::Conv2d { geom, cols } => {
                let (tx, tw, tb) = (x(0), x(1), x(2));
                let (rows, patch, o) = (geom.rows(), geom.patch(), geom.out_channels);
                let hw = geom.height * geom.width;
                let mut g_rows = vec![0.0; rows * o];
                let mut g_bias = vec![0.0; o];
                for b in 0..geom.batch {
                    for oc in 0..o {
                        let src = &g[(b * o + oc) * hw..][..hw];
                        for (p, v) in src.iter().enumerate() {
                            g_rows[(b * hw + p) * o + oc] = *v;
                            g_bias[oc] += v;
                        }
                    }
                }
                let mut g_w = vec![0.0; o * patch];
                kernels::gemm(o, rows, patch, &g_rows, true, cols, false, &mut g_w, false);
                let mut g_cols = vec![0.0; rows * patch];
                kernels::gemm(rows, o, patch, &g_rows, false, tw.data(), false, &mut g_cols, false);
                let g_x = kernels::col2im(&g_cols, geom);
                Ok(vec![
                    Some(like(tx, g_x)?),
                    Some(like(tw, g_w)?),
                    Some(like(tb, g_bias)?),
                ])
            }
            Op::BatchNorm(cache) => {
                let (tx, tg, tb) = (x(0), x(1), x(2));
                let (channels, inner) = (cache.channels, cache.inner);
                let batch = tx.numel() / (channels * inner);
                let count = (batch * inner) as f64;
                let mut g_gamma = vec![0.0; channels];
                let mut g_beta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * inner;
                        for i in off..off + inner {
                            g_gamma[c] += g[i] * cache.xhat[i];
                            g_beta[c] += g[i];
                        }
                    }
                }
                let mut g_x = vec![0.0; tx.numel()];
                for c in 0..channels {
                    let gamma = tg.data()[c];
                    let inv = cache.inv_std[c];
                    match cache.mode {
                        BatchNormMode::Inference => {
                            for b in 0..batch {
                                let off = (b * channels + c) * inner;
                                for i in off..off + inner {
                                    g_x[i] = g[i] * gamma * inv;
                                }
                            }
                        }
                        BatchNormMode::Train => {
                            // dx = inv/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = γ·dy
                            let sum_dxhat = gamma * g_beta[c];
                            let sum_dxhat_xhat = gamma * g_gamma[c];
                            for b in 0..batch {
                                let off = (b * channels + c) * inner;
                                for i in off..off + inner {
                                    let dxhat = g[i] * gamma;
                                    g_x[i] = inv / count
                                        * (count * dxhat
                                            - sum_dxhat
                                            - cache.xhat[i] * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                }
                Ok(vec![
                    Some(like(tx, g_x)?),
                    Some(like(tg, g_gamma)?),
                    Some(like(tb, g_beta)?),
                ])
            }
            Op::LeakyRelu(slope) => unary(&|g, xv, _| if xv > 0.0 { g } else { g * slope }),
            Op::Sigmoid => unary(&|g, _, yv| g * yv * (1.0 - yv)),
            Op::Exp => unary(&|g, _, yv| g * yv),
            Op::Ln => unary(&|g, xv, _| g / xv),
            Op::Log2 => unary(&|g, xv, _| g / (xv * std::f64::consts::LN_2)),
            Op::Sqrt => unary(&|g, _, yv| g * 0.5 / yv),
            Op::Square => unary(&|g, xv, _| 2.0 * g * xv),
            Op::Cos => unary(&|g, xv, _| -g * xv.sin()),
            Op::Sin => unary(&|g, xv, _| g * xv.cos()),
            Op::ClampMin(floor) => unary(&|g, xv, _| if xv > *floor { g } else { 0.0 }),
            Op::Scale(c) => unary(&|g, _, _| g * c),
            Op::AddScalar => unary(&|g, _, _| g),
            Op::PhaseQuantize { .. } => unary(&|g, _, _| g * TAU),
            Op::Softmax => {
                let len = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.numel() / len {
                    let ys = &y.data()[r * len..][..len];
                    let gs = &g[r * len..][..len];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        out[r * len + j] = ys[j] * (gs[j] - dot);
                    }
                }
                Ok(vec![Some(like(y, out)?)])
            }
            Op::LogSoftmax => {
                let len = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.numel() / len {
                    let ys = &y.data()[r * len..][..len];
                    let gs = &g[r * len..][..len];
                    let total: f64 = gs.iter().sum();
                    for j in 0..len {
                        out[r * len + j] = gs[j] - ys[j].exp() * total;
                    }
                }
                Ok(vec![Some(like(y, out)?)])
            }
            Op::Sum => {
                let xi = x(0);
                Ok(vec![Some(Tensor::full(xi.shape(), g[0]))])
            }
            Op::Mean => {
                let xi = x(0);
                Ok(vec![Some(Tensor::full(xi.shape(), g[0] / xi.numel() as f64))])
            }
            Op::SumAxis { outer, len, inner } => {
                let xi = x(0);
                let mut out = vec![0.0; xi.numel()];
                for o in 0..*outer {
                    let src = &g[o * inner..][..*inner];
                    for l in 0..*len {
                        out[(o * len + l) * inner..][..*inner].copy_from_slice(src);
                    }
                }
                Ok(vec![Some(like(xi, out)?)])
            }
            Op::Reshape => Ok(vec![Some(like(x(0), g.to_vec())?)]),
            Op::Concat { outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut parts: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
                for o in 0..*outer {
                    let mut off = o * row;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                parts
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| Ok(Some(like(x(i), p)?)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = Graph::new();
        let x = g.scalar(-1.0).unwrap();
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert!((g.value(y).item().unwrap() + 0.01).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 2])).unwrap();
        // Two output channels, each passing its own input channel through the centre tap.
        let mut w = vec![0.0; 2 * 2 * 9];
        w[4] = 1.0;
        w[9 + 9 + 4] = 1.0;
        let w = g.constant(t(&[2, 2, 3, 3], &w)).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y), &Tensor::ones(&[1, 2, 4, 2]));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let c = g.scalar(3.0).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn errors_on_bad_shapes_and_division_by_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let c = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
        assert!(matches!(g.div(a, b), Err(Error::Numeric(_))));
        assert!(matches!(g.log2(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let a = g.scalar(1e300).unwrap();
        assert!(matches!(g.exp(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn train_batch_norm_standardizes_channels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 5).map(|i| 10.0 * ((i * 7 % 11) as f64) - 3.0).collect();
        let x = g.constant(t(&[2, 3, 5], &data)).unwrap();
        let gamma = g.constant(Tensor::ones(&[3])).unwrap();
        let beta = g.constant(Tensor::zeros(&[3])).unwrap();
        let params = BatchNormParams {
            eps: 1e-5,
            mode: BatchNormMode::Train,
        };
        let y = g.batch_norm(x, gamma, beta, params, None).unwrap();
        let out = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| out[(b * 3 + c) * 5..][..5].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 10.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert!(g.batch_stats(y).is_some());
    }

    #[test]
    fn phase_quantizer_forward_and_surrogate() {
        let mut g = Graph::new();
        let t0 = g.constant(Tensor::from_vec(vec![0.3, 0.875, 1.0])).unwrap();
        let q = g.phase_quantize(t0, Some(3)).unwrap();
        let want = [TAU * 3.0 / 8.0, TAU * 7.0 / 8.0, TAU];
        for (a, b) in g.value(q).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.has_hard_quantizer());

        let mut s = Graph::with_ste_policy(StePolicy::Surrogate);
        let t1 = s.parameter(Tensor::from_vec(vec![0.3])).unwrap();
        let q = s.phase_quantize(t1, Some(3)).unwrap();
        assert!((s.value(q).item().unwrap() - TAU * 0.3).abs() < 1e-12);
        assert!(!s.has_hard_quantizer());
        let l = s.sum(q).unwrap();
        assert!((s.backward(l).unwrap().get(t1).item().unwrap() - TAU).abs() < 1e-12);
    }
}
