//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and returns
//! a [`Var`] handle. Nodes are created in topological order, so the backward
//! pass is a single sweep over decreasing node ids.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with the batch's own per-channel mean and biased variance.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample2x(Var),
    BatchNorm2d { x: Var, gamma: Var, beta: Var, x_hat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Square(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    PairwiseSqDist(Var, Var),
    BceWithLogits { logits: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// The tape. Values live on the nodes; gradients come back from [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss keyed by parameter handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected rank-4 N×C×H×W, got {:?}", t.shape()))),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected rank-2 matrix, got {:?}", t.shape()))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Untracked input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false, false)
    }

    /// Tracked leaf: its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true, true)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, is_param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a` (m×k) times `b` (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a bias vector along the last axis of a matrix or the channel axis
    /// of an N×C×H×W tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        let (channels, inner) = match *tx.shape() {
            [_, c] => (c, 1),
            [_, c, h, w] => (c, h * w),
            _ => return Err(Error::shape("add_bias", format!("unsupported input rank {:?}", tx.shape()))),
        };
        if tb.shape() != [channels] {
            return Err(Error::shape("add_bias", format!("bias {:?} for {channels} channels", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % channels];
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Cross-correlation of N×C×H×W input with F×C×kh×kw filters.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = rank4("conv2d", self.value(x))?;
        let (f, c2, kh, kw) = rank4("conv2d", self.value(w))?;
        if c != c2 {
            return Err(Error::shape("conv2d", format!("input has {c} channels, filters expect {c2}")));
        }
        let geom = ConvGeom::forward((c, h, wd), (f, kh, kw), stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("{kh}×{kw} kernel does not fit {h}×{wd} with pad {pad}")))?;
        let out = kernels::conv2d(&geom, n, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![n, f, geom.out_h, geom.out_w], out);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Transposed convolution of N×F×H×W input with F×C×kh×kw filters; the
    /// adjoint of [`Graph::conv2d`] with the same filters, stride and pad.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, f, h, wd) = rank4("conv_transpose2d", self.value(x))?;
        let (f2, c, kh, kw) = rank4("conv_transpose2d", self.value(w))?;
        if f != f2 {
            return Err(Error::shape("conv_transpose2d", format!("input has {f} channels, filters expect {f2}")));
        }
        let geom = ConvGeom::transposed((f, h, wd), (c, kh, kw), stride, pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", format!("invalid geometry for {h}×{wd} input")))?;
        let out = kernels::conv2d_input_adjoint(&geom, n, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![n, c, geom.height, geom.width], out);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, geom }, &[x, w]))
    }

    /// Non-overlapping 2×2 max pooling.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("maxpool2d", self.value(x))?;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2d", format!("{h}×{w} input is smaller than the 2×2 window")));
        }
        let (values, argmax) = kernels::maxpool2d(n * c, h, w, 2, self.value(x).data());
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], values);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("upsample2x", self.value(x))?;
        let out = kernels::upsample2x(n * c, h, w, self.value(x).data());
        Ok(self.push(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x]))
    }

    /// Per-channel batch normalization with affine `gamma`, `beta`. In
    /// training mode the returned statistics are the batch mean and biased
    /// variance; callers fold them into their running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = rank4("batchnorm2d", self.value(x))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batchnorm2d", format!("affine param {:?} for {c} channels", self.value(p).shape())));
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let data = self.value(x).data();
        let (mean, var, training) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        mean[ch] += data[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        var[ch] += data[(b * c + ch) * plane..][..plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", format!("running stats of length {} for {c} channels", mean.len())));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (i, (xh, o)) in x_hat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (data[i] - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + bt[ch];
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let op = Op::BatchNorm2d { x, gamma, beta, x_hat, inv_std, training };
        Ok((self.push(value, op, &[x, gamma, beta]), mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("argument {bad} is not positive")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| s * v, Op::ScalarMul(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::ReduceMean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rank2("slice_cols", self.value(x))?;
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} out of {cols} columns")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::from_parts(vec![rows, end - start], data);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Column means of an n×k matrix, as a length-k vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rank2("mean_rows", self.value(x))?;
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let t = self.value(x);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        Ok(self.push(Tensor::from_vec(mean), Op::MeanRows(x), &[x]))
    }

    /// Matrix of squared Euclidean distances between rows of `a` (n×k) and `b` (m×k).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rank2("pairwise_sq_dist", self.value(a))?;
        let (m, k2) = rank2("pairwise_sq_dist", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("pairwise_sq_dist", format!("row widths {k} vs {k2}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Elementwise Bernoulli negative log-likelihood of `target` ∈ [0, 1]
    /// under `sigmoid(logits)`, computed stably from the logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        if let Some(bad) = self.value(target).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain("bce_with_logits", format!("target {bad} outside [0, 1]")));
        }
        self.binary("bce_with_logits", logits, target, kernels::bce_with_logits, Op::BceWithLogits { logits, target })
    }

    /// Gradients of the scalar `loss` with respect to every [`Graph::param`]
    /// leaf in its ancestry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                out.grads.insert(Var(id), upstream);
                continue;
            }
            for (input, g) in self.input_grads(node, &upstream) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.value(v).shape().to_vec(), data)
    }

    fn elementwise(&self, x: Var, up: &Tensor, f: impl Fn(f64, f64, f64) -> f64, out: &Tensor) -> Tensor {
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(out.data())
            .zip(up.data())
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect();
        self.like(x, data)
    }

    /// Vector-Jacobian products of one node with respect to its tracked inputs.
    fn input_grads(&self, node: &Node, up: &Tensor) -> Vec<(Var, Tensor)> {
        let mut res = Vec::with_capacity(3);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, up.data(), false, self.value(b).data(), true, &mut da, false);
                    res.push((a, self.like(a, da)));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(a).data(), true, up.data(), false, &mut db, false);
                    res.push((b, self.like(b, db)));
                }
            }
            &Op::AddBias(x, bias) => {
                if self.wants(x) {
                    res.push((x, up.clone()));
                }
                if self.wants(bias) {
                    let shape = self.value(x).shape();
                    let channels = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for (i, g) in up.data().iter().enumerate() {
                        db[(i / inner) % channels] += g;
                    }
                    res.push((bias, self.like(bias, db)));
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let batch = self.value(x).shape()[0];
                if self.wants(x) {
                    let dx = kernels::conv2d_input_adjoint(&geom, batch, up.data(), self.value(w).data());
                    res.push((x, self.like(x, dx)));
                }
                if self.wants(w) {
                    let dw = kernels::conv2d_weight_grad(&geom, batch, self.value(x).data(), up.data());
                    res.push((w, self.like(w, dw)));
                }
            }
            &Op::ConvTranspose2d { x, w, geom } => {
                // y = A^T x with A the forward conv, so dx = A up.
                let batch = self.value(x).shape()[0];
                if self.wants(x) {
                    let dx = kernels::conv2d(&geom, batch, up.data(), self.value(w).data());
                    res.push((x, self.like(x, dx)));
                }
                if self.wants(w) {
                    let dw = kernels::conv2d_weight_grad(&geom, batch, up.data(), self.value(x).data());
                    res.push((w, self.like(w, dw)));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, g) in argmax.iter().zip(up.data()) {
                    dx[src] += g;
                }
                res.push((*x, self.like(*x, dx)));
            }
            &Op::Upsample2x(x) => {
                let s = self.value(x).shape();
                let dx = kernels::upsample2x_adjoint(s[0] * s[1], s[2], s[3], up.data());
                res.push((x, self.like(x, dx)));
            }
            Op::BatchNorm2d { x, gamma, beta, x_hat, inv_std, training } => {
                let s = self.value(*x).shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let mut sum_up = vec![0.0; c];
                let mut sum_up_xhat = vec![0.0; c];
                for (i, (&gi, &xh)) in up.data().iter().zip(x_hat).enumerate() {
                    let ch = (i / plane) % c;
                    sum_up[ch] += gi;
                    sum_up_xhat[ch] += gi * xh;
                }
                if self.wants(*x) {
                    let dx = up
                        .data()
                        .iter()
                        .zip(x_hat)
                        .enumerate()
                        .map(|(i, (&gi, &xh))| {
                            let ch = (i / plane) % c;
                            if *training {
                                g[ch] * inv_std[ch] * (gi - sum_up[ch] / count - xh * sum_up_xhat[ch] / count)
                            } else {
                                g[ch] * inv_std[ch] * gi
                            }
                        })
                        .collect();
                    res.push((*x, self.like(*x, dx)));
                }
                if self.wants(*gamma) {
                    res.push((*gamma, self.like(*gamma, sum_up_xhat)));
                }
                if self.wants(*beta) {
                    res.push((*beta, self.like(*beta, sum_up)));
                }
            }
            &Op::Relu(x) => res.push((x, self.elementwise(x, up, |xi, _, g| if xi > 0.0 { g } else { 0.0 }, y))),
            &Op::Sigmoid(x) => res.push((x, self.elementwise(x, up, |_, yi, g| g * yi * (1.0 - yi), y))),
            &Op::Exp(x) => res.push((x, self.elementwise(x, up, |_, yi, g| g * yi, y))),
            &Op::Log(x) => res.push((x, self.elementwise(x, up, |xi, _, g| g / xi, y))),
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        res.push((v, up.clone()));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    res.push((a, up.clone()));
                }
                if self.wants(b) {
                    res.push((b, up.map(|g| -g)));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    res.push((a, self.elementwise(b, up, |bi, _, g| g * bi, y)));
                }
                if self.wants(b) {
                    res.push((b, self.elementwise(a, up, |ai, _, g| g * ai, y)));
                }
            }
            &Op::ScalarMul(x, s) => res.push((x, up.map(|g| g * s))),
            &Op::AddScalar(x) => res.push((x, up.clone())),
            &Op::Square(x) => res.push((x, self.elementwise(x, up, |xi, _, g| 2.0 * xi * g, y))),
            &Op::ReduceSum(x) => {
                let g = up.data()[0];
                res.push((x, Tensor::full(self.value(x).shape(), g)));
            }
            &Op::ReduceMean(x) => {
                let t = self.value(x);
                let g = up.data()[0] / t.len() as f64;
                res.push((x, Tensor::full(t.shape(), g)));
            }
            &Op::Reshape(x) => res.push((x, self.like(x, up.data().to_vec()))),
            &Op::SliceCols { x, start } => {
                let s = self.value(x).shape();
                let (rows, cols) = (s[0], s[1]);
                let width = up.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(up.row(r));
                }
                res.push((x, self.like(x, dx)));
            }
            &Op::MeanRows(x) => {
                let s = self.value(x).shape();
                let (rows, cols) = (s[0], s[1]);
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(up.data().iter().map(|g| g / rows as f64));
                }
                res.push((x, self.like(x, dx)));
            }
            &Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let g = 2.0 * up.data()[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            let d = g * (ta.data()[i * k + l] - tb.data()[j * k + l]);
                            da[i * k + l] += d;
                            db[j * k + l] -= d;
                        }
                    }
                }
                if self.wants(a) {
                    res.push((a, self.like(a, da)));
                }
                if self.wants(b) {
                    res.push((b, self.like(b, db)));
                }
            }
            &Op::BceWithLogits { logits, target } => {
                if self.wants(logits) {
                    let data = self
                        .value(logits)
                        .data()
                        .iter()
                        .zip(self.value(target).data())
                        .zip(up.data())
                        .map(|((&l, &t), &g)| g * (kernels::sigmoid(l) - t))
                        .collect();
                    res.push((logits, self.like(logits, data)));
                }
                if self.wants(target) {
                    // d/dt [max(l,0) - l t + ln(1 + e^{-|l|})] = -l
                    res.push((target, self.elementwise(logits, up, |l, _, g| -g * l, y)));
                }
            }
        }
        res
    }
}
