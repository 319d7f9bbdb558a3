//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] simply walks it in reverse.
//!
//! ```
//! use dual_aae::autodiff::Graph;
//! use dual_aae::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&g, x).data(), &[2.0, -4.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var, usize),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Mask(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// How [`Graph::batch_norm`] obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-feature batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stochastic: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when `v` is not on a path to the loss.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// True once a random-mask operation has been recorded in training mode.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Slice(a, _, _)
            | Op::Softmax(a, _)
            | Op::Mask(a, _) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op)
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: ({m}x{k}) x ({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`m` vector to every row of an `n×m` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(row).numel() != m {
            return Err(Error::shape(format!(
                "add_row: {m} columns vs row of shape {:?}",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![n, m], data), Op::AddRow(x, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// `max(x, slope·x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::config(format!("leaky_relu slope {slope} outside [0,1)")));
        }
        self.unary("leaky_relu", a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Natural log; any nonpositive input is an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::numeric(format!("log of nonpositive value {bad}")));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum along `axis`, keeping that axis with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(format!("sum_axis: axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, len, inner) = lanes(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis(a, axis))
    }

    /// Mean along `axis`, keeping that axis with length 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.sum_axis(a, axis)?;
        let len = self.value(a).shape()[axis];
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape(format!("concat: axis {axis} for shape {base_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} vs {base_shape:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = lanes(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if start >= end || end > m {
            return Err(Error::shape(format!("slice {start}..{end} of {m} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * m + start..r * m + end]);
        }
        self.push("slice", Tensor::from_parts(vec![n, w], data), Op::Slice(a, start, end))
    }

    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(format!("softmax: axis {axis} for shape {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::numeric("softmax of non-finite logits"));
        }
        let (outer, len, inner) = lanes(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    /// Per-column batch normalization of an `n×m` tensor followed by the
    /// affine map `gamma·x̂ + beta`.
    ///
    /// In batch mode the returned [`BatchStats`] carry the (biased) batch
    /// mean and variance so callers can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(gamma).numel() != m || self.value(beta).numel() != m {
            return Err(Error::shape(format!("batch_norm: gamma/beta must have {m} entries")));
        }
        let src = self.value(x).data();
        let (mean, var, eps, train) = match stats {
            NormStats::Batch { eps } => {
                if n < 2 {
                    return Err(Error::shape("batch_norm in training mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; m];
                for row in src.chunks(m) {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= n as f64);
                let mut var = vec![0.0; m];
                for row in src.chunks(m) {
                    for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, eps, true)
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != m || var.len() != m {
                    return Err(Error::shape(format!("batch_norm: running stats must have {m} entries")));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                let k = r * m + c;
                xhat[k] = (src[k] - mean[c]) * inv_std[c];
                out[k] = g[c] * xhat[k] + b[c];
            }
        }
        let batch_stats = train.then(|| BatchStats { mean, var });
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        let v = self.push("batch_norm", Tensor::from_parts(vec![n, m], out), op)?;
        Ok((v, batch_stats))
    }

    /// Inverted dropout: in training mode zero each element with
    /// probability `p_drop` and scale survivors by `1/(1-p_drop)`.
    /// Outside training mode this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p_drop: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(Error::config(format!("dropout probability {p_drop} outside [0,1)")));
        }
        if !train || p_drop == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p_drop);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("dropout", out, Op::Mask(a, mask))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = self.value(a);
            let data = x.data().iter().zip(y.data()).zip(dy.data()).map(|((&x, &y), &d)| f(x, y, d)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank checked at record time");
                let n = y.cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, self.value(*b).data(), true, &mut da);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, dy.data(), false, &mut db);
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.map(|d| -d));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = tb.data().iter().zip(dy.data()).map(|(x, d)| x * d).collect();
                let gb = ta.data().iter().zip(dy.data()).map(|(x, d)| x * d).collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
                send(*b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::AddRow(x, row) => {
                send(*x, dy.clone());
                let m = y.cols();
                let mut g = vec![0.0; m];
                for chunk in dy.data().chunks(m) {
                    for (acc, d) in g.iter_mut().zip(chunk) {
                        *acc += d;
                    }
                }
                send(*row, Tensor::from_parts(self.value(*row).shape().to_vec(), g));
            }
            Op::Scale(a, c) => send(*a, dy.map(|d| c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                send(*a, Tensor::from_parts(self.value(*a).shape().to_vec(), dy.data().to_vec()))
            }
            Op::Sigmoid(a) => send(*a, elementwise(*a, &|_, y, d| d * y * (1.0 - y))),
            Op::Relu(a) => send(*a, elementwise(*a, &|x, _, d| if x > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                send(*a, elementwise(*a, &|x, _, d| if x > 0.0 { d } else { s * d }))
            }
            Op::Log(a) => send(*a, elementwise(*a, &|x, _, d| d / x)),
            Op::Exp(a) => send(*a, elementwise(*a, &|_, y, d| d * y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*a, elementwise(*a, &|x, _, d| if x >= lo && x <= hi { d } else { 0.0 }))
            }
            Op::Sum(a) => {
                let d = dy.item();
                send(*a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                send(*a, Tensor::full(x.shape(), dy.item() / x.numel() as f64));
            }
            Op::SumAxis(a, axis) => {
                let x = self.value(*a);
                let (outer, len, inner) = lanes(x.shape(), *axis);
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            g[(o * len + l) * inner + i] = dy.data()[o * inner + i];
                        }
                    }
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), g));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = lanes(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.shape()[*axis];
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&dy.data()[start..start + len * inner]);
                    }
                    offset += len;
                    send(p, Tensor::from_parts(t.shape().to_vec(), g));
                }
            }
            Op::Slice(a, start, end) => {
                let x = self.value(*a);
                let m = x.cols();
                let w = end - start;
                let mut g = vec![0.0; x.numel()];
                for (r, chunk) in dy.data().chunks(w).enumerate() {
                    g[r * m + start..r * m + end].copy_from_slice(chunk);
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), g));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = lanes(y.shape(), *axis);
                let (yv, dv) = (y.data(), dy.data());
                let mut g = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| yv[idx(l)] * dv[idx(l)]).sum();
                        for l in 0..len {
                            g[idx(l)] = yv[idx(l)] * (dv[idx(l)] - dot);
                        }
                    }
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, m) = (y.rows(), y.cols());
                let g = self.value(*gamma).data();
                let dv = dy.data();
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let k = r * m + c;
                        dgamma[c] += dv[k] * xhat[k];
                        dbeta[c] += dv[k];
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * m];
                    if *train {
                        // dxhat = dy·gamma; dx = inv_std/n · (n·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                        let nf = n as f64;
                        for c in 0..m {
                            let sum_dxhat = dbeta[c] * g[c];
                            let sum_dxhat_xhat = dgamma[c] * g[c];
                            for r in 0..n {
                                let k = r * m + c;
                                let dxhat = dv[k] * g[c];
                                dx[k] = inv_std[c] / nf * (nf * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..m {
                                let k = r * m + c;
                                dx[k] = dv[k] * g[c] * inv_std[c];
                            }
                        }
                    }
                    send(*x, Tensor::from_parts(vec![n, m], dx));
                }
                let gshape = self.value(*gamma).shape().to_vec();
                send(*gamma, Tensor::from_parts(gshape, dgamma));
                let bshape = self.value(*beta).shape().to_vec();
                send(*beta, Tensor::from_parts(bshape, dbeta));
            }
            Op::Mask(a, mask) => {
                let data = dy.data().iter().zip(mask).map(|(d, k)| d * k).collect();
                send(*a, Tensor::from_parts(y.shape().to_vec(), data));
            }
        }
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

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Magnitude below which gradient errors are measured absolutely rather
/// than relative to the gradient itself.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares the gradient of a scalar function of one tensor against
/// central differences `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), h, tol)
}

/// [`grad_check`] over several input tensors at once.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`
/// with `floor =` [`GRAD_CHECK_FLOOR`]. Functions that record dropout in
/// training mode are rejected.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.is_stochastic() {
            return Err(Error::Invalid("grad_check: function is stochastic (dropout in training mode)".into()));
        }
        if !g.value(out).is_scalar() {
            return Err(Error::shape("grad_check: function must be scalar-valued"));
        }
        let value = g.value(out).item();
        let grads = if want_grad {
            let gr = g.backward(out)?;
            vars.iter().map(|&v| gr.wrt(&g, v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(points, true)?;
    let mut pts = points.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coordinates: 0, passed: true };
    for p in 0..pts.len() {
        for i in 0..pts[p].numel() {
            let orig = pts[p].data()[i];
            pts[p].data_mut()[i] = orig + h;
            let (plus, _) = eval(&pts, false)?;
            pts[p].data_mut()[i] = orig - h;
            let (minus, _) = eval(&pts, false)?;
            pts[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.coordinates += 1;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
