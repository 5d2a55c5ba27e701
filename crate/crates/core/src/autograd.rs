//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so node indices are already a topological order. Backpropagation through
//! time needs nothing special: unrolled timesteps are just more nodes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What an entry of a [`ParamStore`] is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running statistics; never receives gradients.
    Buffer,
    /// Per-layer spike amplitude of a trainable ternary neuron.
    Amplitude,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, role: ParamRole, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            role,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", param.name)));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// Gradient rule for operations defined outside this module.
pub trait BackwardRule {
    /// Returns one gradient per input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    BiasAdd(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    AvgPool2d(Var, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    GroupMean(Var, usize),
    Custom(Vec<Var>, Box<dyn BackwardRule>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Contract(format!(
            "channel op needs rank >= 2, got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves that require grad get gradients in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.role.trainable())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    fn broadcast(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            x.zip_map(y, op, f)
        } else if y.numel() == 1 {
            let s = y.data()[0];
            Ok(x.map(|v| f(v, s)))
        } else if x.numel() == 1 {
            let s = x.data()[0];
            Ok(y.map(|v| f(s, v)))
        } else {
            Err(Error::dim(op, x.shape(), y.shape()))
        }
    }

    /// Elementwise sum; identical shapes or one scalar operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast(a, b, "add", |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product; identical shapes or one scalar operand.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast(a, b, "mul", |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::exp);
        let rg = self.requires(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::ln);
        let rg = self.requires(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.requires(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", x.shape(), &[labels.len()]));
        }
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f32;
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            if labels[i] >= k {
                return Err(Error::Contract(format!("label {} out of range for {k} classes", labels[i])));
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += -(row[labels[i]] - max - z.ln());
        }
        let value = Tensor::scalar(loss / n as f32);
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(vec![n, k], probs)?,
            },
            rg,
        ))
    }

    /// Adds `bias[C]` along dimension 1 of `x[N,C,...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(Error::dim("bias_add", self.value(x).shape(), b.shape()));
        }
        let mut value = self.value(x).clone();
        let bd = b.data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        debug_assert_eq!(value.numel(), n * c * inner);
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(value, Op::BiasAdd(x, bias), rg))
    }

    /// Per-channel normalization of `x[N,C,...]`. With `running = None`
    /// the batch statistics are used and returned; otherwise the given
    /// mean and variance are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<(Var, Option<NormStats>)> {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape())?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::dim("batch_norm", xv.shape(), g.shape()));
        }
        let count = (n * inner) as f32;
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batch_norm", xv.shape(), &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for (i, &v) in xv.data().iter().enumerate() {
                    mean[(i / inner) % c] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (i, &v) in xv.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= count);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::new(
            xv.shape().to_vec(),
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / inner) % c;
                    (v - mean[ch]) * inv_std[ch]
                })
                .collect(),
        )?;
        let (gd, bd) = (g.data(), b.data());
        let value = Tensor::new(
            xhat.shape().to_vec(),
            xhat.data()
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let ch = (i / inner) % c;
                    h * gd[ch] + bd[ch]
                })
                .collect(),
        )?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let stats = batch_stats.then_some(NormStats { mean, var });
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// Non-overlapping `k×k` average pooling of `x[N,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::Config(format!(
                "avg_pool2d with kernel {k} does not tile input {s:?}"
            )));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f32;
        let mut out = vec![0.0f32; nc * oh * ow];
        for p in 0..nc {
            let img = &xv.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += img[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::AvgPool2d(x, k), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Tiles `x` `times` times along the leading dimension.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let value = Tensor::concat_rows(&vec![xv; times.max(1)])?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::RepeatRows(x, times.max(1)), rg))
    }

    /// Averages `groups` consecutive blocks of the leading dimension:
    /// `[G·N, ...] → [N, ...]`, summing blocks in order.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = *xv.shape().first().unwrap_or(&0);
        if groups == 0 || !lead.is_multiple_of(groups) {
            return Err(Error::Contract(format!(
                "group_mean: {lead} rows do not split into {groups} groups"
            )));
        }
        let block = xv.numel() / groups;
        let mut acc = vec![0.0f32; block];
        for g in 0..groups {
            for (a, &v) in acc.iter_mut().zip(&xv.data()[g * block..(g + 1) * block]) {
                *a += v;
            }
        }
        let inv = 1.0 / groups as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        let mut shape = xv.shape().to_vec();
        shape[0] = lead / groups;
        let value = Tensor::new(shape, acc)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::GroupMean(x, groups), rg))
    }

    /// Records an externally computed value with its own gradient rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = inputs.iter().any(|&v| self.requires(v));
        self.push(value, Op::Custom(inputs.to_vec(), rule), rg)
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn gradients(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contribs = self.local_grads(node, &g)?;
            for (v, dg) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += d;
                        }
                    }
                    None => grads[v.0] = Some(dg),
                }
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward pass that accumulates into every parameter used on the tape.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.requires(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let bt = tensor::transpose(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_acc(g.data(), &bt, &mut da, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if need(*b) {
                    let at = tensor::transpose(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_acc(&at, g.data(), &mut db, k, m, n);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (di, dk) = tensor::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    need(*input),
                    need(*kernel),
                )?;
                out.extend(di.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        out.push((v, reduce_to(g, val(v))));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if need(v) {
                        let o = val(other);
                        let prod = if o.numel() == 1 {
                            let s = o.data()[0];
                            g.map(|x| x * s)
                        } else {
                            g.zip_map(o, "mul backward", |x, y| x * y)?
                        };
                        out.push((v, reduce_to(&prod, val(v))));
                    }
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::Relu(x) => out.push((
                *x,
                g.zip_map(val(*x), "relu backward", |d, v| if v > 0.0 { d } else { 0.0 })?,
            )),
            Op::Exp(x) => out.push((*x, g.zip_map(&node.value, "exp backward", |d, y| d * y)?)),
            Op::Log(x) => out.push((*x, g.zip_map(val(*x), "log backward", |d, v| d / v)?)),
            Op::Mean(x) => {
                let xv = val(*x);
                let s = g.data()[0] / xv.numel().max(1) as f32;
                out.push((*x, Tensor::full(xv.shape(), s)));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.data()[0]))),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let s = g.data()[0] / n as f32;
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                out.push((*logits, Tensor::new(vec![n, k], d)?));
            }
            Op::BiasAdd(x, bias) => {
                if need(*x) {
                    out.push((*x, g.clone()));
                }
                if need(*bias) {
                    let (_, c, inner) = channel_layout(g.shape())?;
                    let mut db = vec![0.0f32; c];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), db)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let count = (n * inner) as f32;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for (i, (&d, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += d * h;
                    dbeta[ch] += d;
                }
                if need(*x) {
                    let gd = val(*gamma).data();
                    let dx: Vec<f32> = g
                        .data()
                        .iter()
                        .zip(xhat.data())
                        .enumerate()
                        .map(|(i, (&d, &h))| {
                            let ch = (i / inner) % c;
                            if *batch_stats {
                                gd[ch] * inv_std[ch] / count
                                    * (count * d - dbeta[ch] - h * dgamma[ch])
                            } else {
                                d * gd[ch] * inv_std[ch]
                            }
                        })
                        .collect();
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?));
                }
            }
            Op::AvgPool2d(x, k) => {
                let s = val(*x).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f32;
                let mut dx = vec![0.0f32; nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] =
                                g.data()[(p * oh + y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                out.push((*x, Tensor::new(s.to_vec(), dx)?));
            }
            Op::Reshape(x) => out.push((*x, g.reshape(val(*x).shape())?)),
            Op::RepeatRows(x, times) => {
                let xv = val(*x);
                let block = xv.numel();
                let mut dx = vec![0.0f32; block];
                for t in 0..*times {
                    for (a, &v) in dx.iter_mut().zip(&g.data()[t * block..(t + 1) * block]) {
                        *a += v;
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::GroupMean(x, groups) => {
                let inv = 1.0 / *groups as f32;
                let parts: Vec<Tensor> = (0..*groups).map(|_| g.map(|v| v * inv)).collect();
                out.push((*x, Tensor::concat_rows(&parts)?.reshape(val(*x).shape())?));
            }
            Op::Custom(inputs, rule) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let gs = rule.backward(g, &ins, &needs)?;
                for (v, dg) in inputs.iter().zip(gs) {
                    if let Some(dg) = dg {
                        if dg.shape() != val(*v).shape() {
                            return Err(Error::dim("custom backward", dg.shape(), val(*v).shape()));
                        }
                        out.push((*v, dg));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf or parameter node.
    /// `None` means the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                if p.grad.shape() != g.shape() {
                    return Err(Error::dim("accumulate grad", p.grad.shape(), g.shape()));
                }
                for (a, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += d;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_ce_two_equal_logits_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn add_zero_and_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item().unwrap(), 2.0);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .insert(Parameter::new("w", ParamRole::Weight, Tensor::scalar(2.0)))
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(wv, x).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[3.0]);
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .insert(Parameter::new("w", ParamRole::Weight, Tensor::from_vec(vec![1.0, 2.0])))
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0, 2.0]);
    }

    #[test]
    fn disconnected_parameter_keeps_zero_grad() {
        let mut store = ParamStore::new();
        let w = store
            .insert(Parameter::new("w", ParamRole::Weight, Tensor::scalar(1.0)))
            .unwrap();
        let unused = store
            .insert(Parameter::new("u", ParamRole::Weight, Tensor::from_vec(vec![5.0, 6.0])))
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let _uv = tape.param(&store, unused);
        let loss = tape.scale(wv, 4.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.get(w).grad.data(), &[4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn buffers_get_no_gradient() {
        let mut store = ParamStore::new();
        let b = store
            .insert(Parameter::new("b", ParamRole::Buffer, Tensor::scalar(2.0)))
            .unwrap();
        let mut tape = Tape::new();
        let bv = tape.param(&store, b);
        let loss = tape.scale(bv, 3.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).grad.data(), &[0.0]);
    }
}
