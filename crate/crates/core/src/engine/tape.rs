//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes are therefore in topological
//! order by construction, and [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a straight-through generator: the forward output is a
/// hard one-hot, the backward pass uses the Jacobian of a relaxation.
#[derive(Clone, Debug)]
pub enum StraightThrough {
    /// Gradient reaches only the selected class's logit.
    Select { ids: Vec<usize> },
    /// Relaxation `tanh(z / tau)`; `relaxed` holds the forward `tanh` values.
    Tanh { relaxed: Vec<f64>, tau: f64 },
    /// Relaxation `softmax_C(z / tau)`; `relaxed` holds the probabilities.
    Softmax { relaxed: Vec<f64>, tau: f64 },
}

type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    ConcatChannels { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Embedding { table: Var, onehot: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    StraightThrough { logits: Var, rule: StraightThrough },
    Custom { name: String, inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Embedding { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy_dense",
            Op::StraightThrough { rule, .. } => match rule {
                StraightThrough::Select { .. } => "naive_max_st",
                StraightThrough::Tanh { .. } => "gumbel_max_st_tanh",
                StraightThrough::Softmax { .. } => "gumbel_max_st_softmax",
            },
            Op::Custom { name, .. } => name,
        }
    }
}

/// Names of every built-in operation with a backward rule.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "sum",
    "relu",
    "conv1d",
    "conv_transpose1d",
    "maxpool1d",
    "concat_channels",
    "slice_channels",
    "embedding_lookup",
    "cross_entropy_dense",
    "naive_max_st",
    "gumbel_max_st_tanh",
    "gumbel_max_st_softmax",
];

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// `None` when the node is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
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

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    /// Input ids of the record that produced `v` (empty for leaves).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) => vec![*a],
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool1d { x, .. } | Op::SliceChannels { x, .. } => vec![*x],
            Op::ConcatChannels { parts } => parts.clone(),
            Op::Embedding { table, onehot } => vec![*table, *onehot],
            Op::CrossEntropy { logits, .. } | Op::StraightThrough { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| if *x < 0.0 { 0.0 } else { *x }).collect())
            .expect("same shape");
        let ng = self.needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    /// `y[b,o,t'] = bias[o] + Σ_{c,j} x[b,c,t'·stride + j − pad] · w[o,c,j]`
    /// with zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, t_in) = self.value(x).dims3()?;
        let (c_out, wc_in, kernel) = self.value(w).dims3()?;
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv1d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if self.value(b).numel() != c_out {
            return Err(Error::Dimension(format!(
                "conv1d: bias has {} entries for {c_out} output channels",
                self.value(b).numel()
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv1d: stride must be positive".into()));
        }
        if kernel > t_in + 2 * pad {
            return Err(Error::Geometry(format!(
                "conv1d: kernel {kernel} exceeds padded length {}",
                t_in + 2 * pad
            )));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
            stride,
            pad,
        };
        let y = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, t_out], y)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, ng))
    }

    /// Adjoint of [`Tape::conv1d`] with the same weight array and no padding.
    /// Output length is `(T − 1)·stride + k`, i.e. `T·stride` when `k = stride`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, c_in, t_in) = self.value(x).dims3()?;
        let (wc_in, c_out, kernel) = self.value(w).dims3()?;
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv_transpose1d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if self.value(b).numel() != c_out {
            return Err(Error::Dimension(format!(
                "conv_transpose1d: bias has {} entries for {c_out} output channels",
                self.value(b).numel()
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv_transpose1d: stride must be positive".into()));
        }
        let t_out = (t_in - 1) * stride + kernel;
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
            stride,
            pad: 0,
        };
        let y = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, t_out], y)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose1d { x, w, b, geom }, ng))
    }

    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (batch, c, t) = self.value(x).dims3()?;
        if window == 0 || t % window != 0 {
            return Err(Error::Geometry(format!(
                "maxpool1d: time length {t} is not divisible by window {window}"
            )));
        }
        let (y, argmax) = kernels::maxpool1d_forward(self.value(x).data(), batch * c, t, window);
        let value = Tensor::new(vec![batch, c, t / window], y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::MaxPool1d { x, argmax }, ng))
    }

    /// Concatenates `[B, C_i, T]` tensors along the channel axis in order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_channels: nothing to concatenate".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let (batch, _, t) = self.value(first).dims3()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, pt) = self.value(p).dims3()?;
            if pb != batch || pt != t {
                return Err(Error::Dimension(format!(
                    "concat_channels: part of shape {:?} does not match batch {batch} / time {t}",
                    self.value(p).shape()
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut y = Vec::with_capacity(batch * total * t);
        for b in 0..batch {
            for (&p, &pc) in parts.iter().zip(&chans) {
                y.extend_from_slice(&self.value(p).data()[b * pc * t..(b + 1) * pc * t]);
            }
        }
        let value = Tensor::new(vec![batch, total, t], y)?;
        let ng = self.needs(parts);
        Ok(self.push(
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Channels `start..end` of a `[B, C, T]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (batch, c, t) = self.value(x).dims3()?;
        if start >= end || end > c {
            return Err(Error::Dimension(format!(
                "slice_channels: range {start}..{end} invalid for {c} channels"
            )));
        }
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(batch * (end - start) * t);
        for b in 0..batch {
            y.extend_from_slice(&src[(b * c + start) * t..(b * c + end) * t]);
        }
        let value = Tensor::new(vec![batch, end - start, t], y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, ng))
    }

    /// `out[b, :, t] = tableᵀ · onehot[b, :, t]` for a `[C, E]` table.
    pub fn embedding(&mut self, table: Var, onehot: Var) -> Result<Var> {
        let tshape = self.value(table).shape().to_vec();
        let [classes, dim] = tshape[..] else {
            return Err(Error::Dimension(format!(
                "embedding: table must be [C, E], got {tshape:?}"
            )));
        };
        let (batch, c, t) = self.value(onehot).dims3()?;
        if c != classes {
            return Err(Error::Dimension(format!(
                "embedding: one-hot has {c} classes but table has {classes}"
            )));
        }
        let y = kernels::embedding_forward(
            self.value(table).data(),
            self.value(onehot).data(),
            batch,
            classes,
            dim,
            t,
        );
        let value = Tensor::new(vec![batch, dim, t], y)?;
        let ng = self.needs(&[table, onehot]);
        Ok(self.push(value, Op::Embedding { table, onehot }, ng))
    }

    /// Mean over `(b, t)` of `−log softmax(logits[b, :, t])[target]`.
    /// `targets` is in `[B, T]` order.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, classes, t) = self.value(logits).dims3()?;
        if targets.len() != batch * t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {batch}x{t} positions",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::Label(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        let mut probs = vec![0.0; z.len()];
        for b in 0..batch {
            let base = b * classes * t;
            for tt in 0..t {
                let m = (0..classes).map(|c| z[base + c * t + tt]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..classes {
                    let e = (z[base + c * t + tt] - m).exp();
                    probs[base + c * t + tt] = e;
                    sum += e;
                }
                for c in 0..classes {
                    probs[base + c * t + tt] /= sum;
                }
                let y = targets[b * t + tt];
                total += m + sum.ln() - z[base + y * t + tt];
            }
        }
        let value = Tensor::scalar(total / (batch * t) as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Records a straight-through node: `forward` is emitted as the value,
    /// `rule` defines the backward pass into `logits`.
    pub fn straight_through(&mut self, logits: Var, forward: Tensor, rule: StraightThrough) -> Result<Var> {
        if forward.shape() != self.value(logits).shape() {
            return Err(Error::Dimension(format!(
                "straight_through: forward {:?} vs logits {:?}",
                forward.shape(),
                self.value(logits).shape()
            )));
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(forward, Op::StraightThrough { logits, rule }, ng))
    }

    /// Records an operation with a caller-supplied backward rule. The rule
    /// receives the input values and the upstream gradient and returns one
    /// gradient per input.
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Var {
        let ng = self.needs(inputs);
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((d, gi), bi) in d.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| {
                for (d, gi) in d.iter_mut().zip(g) {
                    *d += gi * f;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d| {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Relu(a) => acc(*a, &mut |d| {
                for ((d, gi), o) in d.iter_mut().zip(g).zip(out.data()) {
                    if *o > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Conv1d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw, db) =
                    kernels::conv1d_backward(self.value(*x).data(), self.value(*w).data(), g, geom, need_dx);
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw, db) = kernels::conv_transpose1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    need_dx,
                );
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::MaxPool1d { x, argmax } => acc(*x, &mut |d| {
                for (&src, gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
            }),
            Op::ConcatChannels { parts } => {
                let (batch, total, t) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    acc(p, &mut |d| {
                        for b in 0..batch {
                            let src = &g[(b * total + offset) * t..(b * total + offset + pc) * t];
                            add_into(&mut d[b * pc * t..(b + 1) * pc * t], src);
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let (batch, c, t) = self.value(*x).dims3().expect("rank 3");
                let width = out.shape()[1];
                acc(*x, &mut |d| {
                    for b in 0..batch {
                        let dst = &mut d[(b * c + start) * t..(b * c + start + width) * t];
                        add_into(dst, &g[b * width * t..(b + 1) * width * t]);
                    }
                });
            }
            Op::Embedding { table, onehot } => {
                let (batch, classes, t) = self.value(*onehot).dims3().expect("rank 3");
                let dim = out.shape()[1];
                let (tv, ov) = (self.value(*table).data(), self.value(*onehot).data());
                acc(*table, &mut |d| {
                    for b in 0..batch {
                        for c in 0..classes {
                            let ohrow = &ov[(b * classes + c) * t..][..t];
                            for e in 0..dim {
                                let grow = &g[(b * dim + e) * t..][..t];
                                d[c * dim + e] += ohrow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*onehot, &mut |d| {
                    for b in 0..batch {
                        for c in 0..classes {
                            let drow = &mut d[(b * classes + c) * t..][..t];
                            for e in 0..dim {
                                let wv = tv[c * dim + e];
                                let grow = &g[(b * dim + e) * t..][..t];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (batch, classes, t) = self.value(*logits).dims3().expect("rank 3");
                let scale = g[0] / (batch * t) as f64;
                acc(*logits, &mut |d| {
                    for b in 0..batch {
                        for c in 0..classes {
                            for tt in 0..t {
                                let i = (b * classes + c) * t + tt;
                                let hit = if targets[b * t + tt] == c { 1.0 } else { 0.0 };
                                d[i] += scale * (probs[i] - hit);
                            }
                        }
                    }
                });
            }
            Op::StraightThrough { logits, rule } => {
                let (batch, classes, t) = self.value(*logits).dims3().expect("rank 3");
                acc(*logits, &mut |d| match rule {
                    StraightThrough::Select { ids } => {
                        for b in 0..batch {
                            for tt in 0..t {
                                let i = (b * classes + ids[b * t + tt]) * t + tt;
                                d[i] += g[i];
                            }
                        }
                    }
                    StraightThrough::Tanh { relaxed, tau } => {
                        for ((d, gi), y) in d.iter_mut().zip(g).zip(relaxed) {
                            *d += gi * (1.0 - y * y) / tau;
                        }
                    }
                    StraightThrough::Softmax { relaxed, tau } => {
                        for b in 0..batch {
                            for tt in 0..t {
                                let col = |c: usize| (b * classes + c) * t + tt;
                                let inner: f64 = (0..classes).map(|c| relaxed[col(c)] * g[col(c)]).sum();
                                for c in 0..classes {
                                    d[col(c)] += relaxed[col(c)] * (g[col(c)] - inner) / tau;
                                }
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, backward, .. } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = backward(&values, g);
                for (v, dv) in inputs.iter().zip(dins) {
                    acc(*v, &mut |d| add_into(d, &dv));
                }
            }
        }
    }
}
