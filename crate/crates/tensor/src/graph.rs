//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node holding
//! its forward value and the inputs needed by its gradient rule. Node ids only
//! ever reference earlier nodes, so a single reverse sweep over the tape is a
//! valid topological traversal. Build a fresh graph for every forward pass.
//!
//! A graph built with [`Graph::reference`] additionally evaluates every
//! forward value in `f64`. The finite-difference checker reads those to keep
//! its own rounding far below the error it measures.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::ops::{self, Activation, Elementwise, Padding};
use crate::tensor::{Element, Tensor, TensorOf};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feature grouping used by the group-norm reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAxis {
    /// One group per index of the leading axis.
    Leading,
    /// One group per index of the second axis.
    Second,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(Elementwise, Var, Var),
    AddBias(Var, Var),
    ScaleShift(Var, f32),
    Activation(Activation, Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Depthwise {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelsLast(Var),
    ChannelsFirst(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    AbsSum(Var),
    SquareSum(Var),
    GroupNormSum {
        x: Var,
        axis: GroupAxis,
        norms: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // Unrounded result of scalar reductions.
    wide: Option<f64>,
    reference: Option<TensorOf<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    reference: bool,
}

/// Gradients of a scalar root with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that also carries an `f64` evaluation of every node.
    pub fn reference() -> Self {
        Self {
            nodes: Vec::new(),
            reference: true,
        }
    }

    pub fn is_reference(&self) -> bool {
        self.reference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        let r = self.reference.then(|| t.cast());
        self.push_with(t, r, Op::Leaf, true)
    }

    /// A leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let r = self.reference.then(|| t.cast());
        self.push_with(t, r, Op::Leaf, false)
    }

    /// Constant leaf given at `f64`; on a plain graph only its rounding is kept.
    pub fn constant_f64(&mut self, t: TensorOf<f64>) -> Var {
        let r = self.reference.then(|| t.clone());
        self.push_with(t.cast(), r, Op::Leaf, false)
    }

    /// The `f64` evaluation of `v` on a reference graph.
    pub fn reference_value(&self, v: Var) -> Option<&TensorOf<f64>> {
        self.nodes[v.0].reference.as_ref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_with(
        &mut self,
        value: Tensor,
        reference: Option<TensorOf<f64>>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            wide: None,
            reference,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(
        &mut self,
        value: f64,
        reference: Option<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        let r = reference.map(TensorOf::scalar);
        let v = self.push_with(Tensor::scalar(value as f32), r, op, requires_grad);
        self.nodes[v.0].wide = Some(value);
        v
    }

    /// Value of a scalar node at the best precision available: the `f64`
    /// evaluation on a reference graph, else the accumulator of a reduction.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        match (&node.reference, node.wide) {
            (Some(r), _) => r.item(),
            (None, Some(w)) => w,
            (None, None) => node.value.item() as f64,
        }
    }

    fn refd(&self, v: Var) -> &TensorOf<f64> {
        self.nodes[v.0]
            .reference
            .as_ref()
            .expect("reference graph nodes carry f64 values")
    }

    // Evaluates `f` on the f64 values of `vars` when this is a reference graph.
    fn lift<R>(
        &self,
        vars: &[Var],
        f: impl FnOnce(&[&TensorOf<f64>]) -> Result<R>,
    ) -> Result<Option<R>> {
        if !self.reference {
            return Ok(None);
        }
        let inputs: Vec<&TensorOf<f64>> = vars.iter().map(|&v| self.refd(v)).collect();
        f(&inputs).map(Some)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let r = self.lift(&[a, b], |t| ops::matmul(t[0], t[1]))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push_with(value, r, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let value = ops::elementwise(op, self.value(a), self.value(b))?;
        let r = self.lift(&[a, b], |t| ops::elementwise(op, t[0], t[1]))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push_with(value, r, Op::Elementwise(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// Explicit per-feature bias; see [`ops::add_bias`] for the layout rule.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_bias(self.value(x), self.value(bias))?;
        let r = self.lift(&[x, bias], |t| ops::add_bias(t[0], t[1]))?;
        let rg = self.tracks(&[x, bias]);
        Ok(self.push_with(value, r, Op::AddBias(x, bias), rg))
    }

    /// `scale · x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let (s64, t64) = (scale as f64, shift as f64);
        let r = self.reference.then(|| self.refd(x).map(|v| s64 * v + t64));
        let rg = self.tracks(&[x]);
        self.push_with(value, r, Op::ScaleShift(x, scale), rg)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.scale_shift(x, -1.0, 1.0)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = ops::activation(kind, self.value(x));
        let r = self.reference.then(|| ops::activation(kind, self.refd(x)));
        let rg = self.tracks(&[x]);
        self.push_with(value, r, Op::Activation(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let value = ops::concat(self.value(a), self.value(b), axis)?;
        let r = self.lift(&[a, b], |t| ops::concat(t[0], t[1], axis))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push_with(value, r, Op::Concat { a, b, axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice(self.value(x), axis, start, len)?;
        let r = self.lift(&[x], |t| ops::slice(t[0], axis, start, len))?;
        let rg = self.tracks(&[x]);
        Ok(self.push_with(value, r, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let r = self.lift(&[x], |t| t[0].reshape(value.shape().to_vec()))?;
        let rg = self.tracks(&[x]);
        Ok(self.push_with(value, r, Op::Reshape(x), rg))
    }

    /// Collapses everything after the leading axis: `[B×…]` → `[B×rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, [b, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        let r = self.reference.then(|| self.refd(x).sum_f64());
        let rg = self.tracks(&[x]);
        self.push_scalar(s, r, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).sum_f64() / n;
        let r = self.reference.then(|| self.refd(x).sum_f64() / n);
        let rg = self.tracks(&[x]);
        self.push_scalar(s, r, Op::Mean(x), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        let r = self.lift(&[x, w], |t| ops::conv2d(t[0], t[1], stride, padding))?;
        let (_, c, h, wd, _) = ops::image_dims("conv2d", self.value(x))?;
        let k = self.shape(w)[2];
        let geo = ops::resolve_geometry("conv2d", c, h, wd, k, stride, padding)?;
        let rg = self.tracks(&[x, w]);
        Ok(self.push_with(value, r, Op::Conv2d { x, w, geo }, rg))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let value = ops::depthwise_conv2d(self.value(x), self.value(w), stride, padding)?;
        let r = self.lift(&[x, w], |t| {
            ops::depthwise_conv2d(t[0], t[1], stride, padding)
        })?;
        let (_, c, h, wd, _) = ops::image_dims("depthwise_conv2d", self.value(x))?;
        let k = self.shape(w)[1];
        let geo = ops::resolve_geometry("depthwise_conv2d", c, h, wd, k, stride, padding)?;
        let rg = self.tracks(&[x, w]);
        Ok(self.push_with(value, r, Op::Depthwise { x, w, geo }, rg))
    }

    pub fn depthwise_separable_conv2d(
        &mut self,
        x: Var,
        depth: Var,
        point: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let ps = self.shape(point);
        if ps.len() != 4 || ps[2] != 1 || ps[3] != 1 {
            return dim_err(
                "depthwise_separable_conv2d",
                format!("pointwise filters must be [N×C×1×1], got {ps:?}"),
            );
        }
        let d = self.depthwise_conv2d(x, depth, stride, padding)?;
        self.conv2d(d, point, 1, Padding::Valid)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (value, argmax) = ops::max_pool_with_argmax(self.value(x), size)?;
        let r = self.lift(&[x], |t| ops::max_pool2d(t[0], size))?;
        let rg = self.tracks(&[x]);
        Ok(self.push_with(value, r, Op::MaxPool { x, argmax }, rg))
    }

    pub fn to_channels_last(&mut self, x: Var) -> Result<Var> {
        let value = ops::to_channels_last(self.value(x))?;
        let r = self.lift(&[x], |t| ops::to_channels_last(t[0]))?;
        let rg = self.tracks(&[x]);
        Ok(self.push_with(value, r, Op::ChannelsLast(x), rg))
    }

    pub fn from_channels_last(
        &mut self,
        x: Var,
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let value = ops::from_channels_last(self.value(x), batch, channels, height, width)?;
        let r = self.lift(&[x], |t| {
            ops::from_channels_last(t[0], batch, channels, height, width)
        })?;
        let rg = self.tracks(&[x]);
        Ok(self.push_with(value, r, Op::ChannelsFirst(x), rg))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (total, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        let r = self.lift(&[logits], |t| {
            softmax_cross_entropy(t[0], labels).map(|(l, _)| l)
        })?;
        let rg = self.tracks(&[logits]);
        Ok(self.push_scalar(
            total,
            r,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ |x_i|`.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = abs_sum_of(self.value(x));
        let r = self.reference.then(|| abs_sum_of(self.refd(x)));
        let rg = self.tracks(&[x]);
        self.push_scalar(s, r, Op::AbsSum(x), rg)
    }

    /// `Σ x_i²`.
    pub fn square_sum(&mut self, x: Var) -> Var {
        let s = square_sum_of(self.value(x));
        let r = self.reference.then(|| square_sum_of(self.refd(x)));
        let rg = self.tracks(&[x]);
        self.push_scalar(s, r, Op::SquareSum(x), rg)
    }

    /// `Σ_g ‖x_g‖₂` over groups along `axis`; requires rank ≥ 2.
    pub fn group_norm_sum(&mut self, x: Var, axis: GroupAxis) -> Result<Var> {
        let norms = group_norms(self.value(x), axis)?;
        let total: f64 = norms.iter().map(|&n| n as f64).sum();
        let r = self.lift(&[x], |t| Ok(group_norms(t[0], axis)?.iter().sum::<f64>()))?;
        let rg = self.tracks(&[x]);
        Ok(self.push_scalar(total, r, Op::GroupNormSum { x, axis, norms }, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(root_shape.to_vec()));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g.data(), bv.data(), &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(m, k, n, av.data(), g.data(), &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Elementwise(op, a, b) => match op {
                Elementwise::Add => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                Elementwise::Sub => {
                    self.accumulate(grads, *a, g.clone());
                    if self.needs(*b) {
                        self.accumulate(grads, *b, g.map(|v| -v));
                    }
                }
                Elementwise::Mul => {
                    if self.needs(*a) {
                        let da = ops::elementwise(Elementwise::Mul, g, self.value(*b))?;
                        self.accumulate(grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = ops::elementwise(Elementwise::Mul, g, self.value(*a))?;
                        self.accumulate(grads, *b, db);
                    }
                }
            },
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let (outer, channels, inner) =
                        ops::bias_layout(self.value(*x), self.value(*bias))?;
                    let mut db = vec![0.0f32; channels];
                    for o in 0..outer {
                        for (c, slot) in db.iter_mut().enumerate() {
                            let start = (o * channels + c) * inner;
                            *slot += g.data()[start..start + inner].iter().sum::<f32>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![channels], db));
                }
            }
            Op::ScaleShift(x, scale) => {
                if self.needs(*x) {
                    let s = *scale;
                    self.accumulate(grads, *x, g.map(|v| s * v));
                }
            }
            Op::Activation(kind, x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(node.value.data())
                        .map(|((&gv, &xi), &yi)| gv * kind.derivative(xi, yi))
                        .collect();
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::Concat { a, b, axis } => {
                let at = self.shape(*a)[*axis];
                let (ga, gb) = ops::split(g, *axis, at)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let len = g.shape()[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let mut dx = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        let dst = o * xs[*axis] * inner + start * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xs, dx));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.reshape(self.shape(*x).to_vec())?);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), g.item()));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).len() as f32;
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::full(self.shape(*x).to_vec(), g.item() / n),
                    );
                }
            }
            Op::Conv2d { x, w, geo } => self.conv2d_backward(*x, *w, geo, g, grads),
            Op::Depthwise { x, w, geo } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let img = geo.channels * geo.height * geo.width;
                let out = geo.channels * geo.out_pixels();
                let batch = xv.len() / img;
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                for i in 0..batch {
                    kernels::depthwise_backward(
                        geo,
                        &xv.data()[i * img..(i + 1) * img],
                        wv.data(),
                        &g.data()[i * out..(i + 1) * out],
                        dx.as_deref_mut().map(|d| &mut d[i * img..(i + 1) * img]),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                }
            }
            Op::ChannelsLast(x) => {
                if self.needs(*x) {
                    let (b, c, h, w, batched) =
                        ops::image_dims("to_channels_last", self.value(*x))?;
                    let dx = ops::from_channels_last(g, b, c, h, w)?;
                    let dx = if batched {
                        dx
                    } else {
                        dx.reshape(vec![c, h, w])?
                    };
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ChannelsFirst(x) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, ops::to_channels_last(g)?);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let s = self.shape(*logits).to_vec();
                    let c = s[1];
                    let scale = g.item() / labels.len() as f32;
                    let mut d = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        d[i * c + label] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    self.accumulate(grads, *logits, Tensor::from_parts(s, d));
                }
            }
            Op::AbsSum(x) => {
                if self.needs(*x) {
                    let gv = g.item();
                    // Subgradient zero at exactly zero.
                    let dx = self.value(*x).map(|v| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SquareSum(x) => {
                if self.needs(*x) {
                    let gv = g.item();
                    self.accumulate(grads, *x, self.value(*x).map(|v| 2.0 * gv * v));
                }
            }
            Op::GroupNormSum { x, axis, norms } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gv = g.item();
                    let mut dx = vec![0.0; xv.len()];
                    for_each_group_member(xv.shape(), *axis, |group, idx| {
                        let n = norms[group];
                        // Zero groups take the zero subgradient.
                        if n > 0.0 {
                            dx[idx] = gv * xv.data()[idx] / n;
                        }
                    });
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        geo: &ConvGeometry,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let n = wv.shape()[0];
        let patch = geo.patch_len();
        let px = geo.out_pixels();
        let img = geo.channels * geo.height * geo.width;
        let batch = xv.len() / img;
        let mut cols = vec![0.0; patch * px];
        let mut dx = self.needs(x).then(|| vec![0.0; xv.len()]);
        let mut dw = self.needs(w).then(|| vec![0.0; wv.len()]);
        for i in 0..batch {
            let go = &g.data()[i * n * px..(i + 1) * n * px];
            if let Some(dw) = dw.as_deref_mut() {
                kernels::im2col(geo, &xv.data()[i * img..(i + 1) * img], &mut cols);
                kernels::gemm_nt(n, px, patch, go, &cols, dw, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                kernels::gemm_tn(n, patch, px, wv.data(), go, &mut cols, false);
                kernels::col2im(geo, &cols, &mut dx[i * img..(i + 1) * img]);
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, Tensor::from_parts(wv.shape().to_vec(), dw));
        }
    }
}

fn group_count(shape: &[usize], axis: GroupAxis) -> usize {
    match axis {
        GroupAxis::Leading => shape[0],
        GroupAxis::Second => shape[1],
    }
}

fn for_each_group_member(shape: &[usize], axis: GroupAxis, mut f: impl FnMut(usize, usize)) {
    let lead = shape[0];
    let second = shape[1];
    let inner: usize = shape[2..].iter().product();
    for i in 0..lead {
        for j in 0..second {
            let group = match axis {
                GroupAxis::Leading => i,
                GroupAxis::Second => j,
            };
            let base = (i * second + j) * inner;
            for k in 0..inner {
                f(group, base + k);
            }
        }
    }
}

/// Euclidean norm of every group of `t` along `axis`.
pub fn group_norms<T: Element>(t: &TensorOf<T>, axis: GroupAxis) -> Result<Vec<T>> {
    if t.rank() < 2 {
        return dim_err(
            "group_norms",
            format!("grouping needs rank ≥ 2, got {:?}", t.shape()),
        );
    }
    let mut sq = vec![0.0f64; group_count(t.shape(), axis)];
    for_each_group_member(t.shape(), axis, |group, idx| {
        let v = to_f64(t.data()[idx]);
        sq[group] += v * v;
    });
    Ok(sq.into_iter().map(|s| from_f64(s.sqrt())).collect())
}

fn to_f64<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn from_f64<T: Element>(v: f64) -> T {
    T::from(v).unwrap_or_else(T::nan)
}

fn abs_sum_of<T: Element>(t: &TensorOf<T>) -> f64 {
    t.data().iter().map(|&v| to_f64(v).abs()).sum()
}

fn square_sum_of<T: Element>(t: &TensorOf<T>) -> f64 {
    t.data().iter().map(|&v| to_f64(v) * to_f64(v)).sum()
}

/// Mean cross-entropy of `[B×C]` logits and the softmax probabilities.
fn softmax_cross_entropy<T: Element>(
    logits: &TensorOf<T>,
    labels: &[usize],
) -> Result<(f64, Vec<T>)> {
    let (b, c) = match *logits.shape() {
        [b, c] => (b, c),
        _ => {
            return dim_err(
                "cross_entropy",
                format!("logits must be [B×C], got {:?}", logits.shape()),
            )
        }
    };
    if labels.len() != b {
        return dim_err(
            "cross_entropy",
            format!("{} labels for batch {b}", labels.len()),
        );
    }
    let mut probs = vec![T::zero(); b * c];
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TensorError::LabelOutOfRange {
                op: "cross_entropy",
                label,
                classes: c,
            });
        }
        let row: Vec<f64> = logits.row(i).iter().map(|&v| to_f64(v)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += max + z.ln() - row[label];
        for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(&row) {
            *p = from_f64((v - max).exp() / z);
        }
    }
    Ok((total / b as f64, probs))
}
