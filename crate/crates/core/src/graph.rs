//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. Parents always have a
//! smaller index than their children, so reverse index order is a valid
//! topological order for [`Graph::backward`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QaError, Result};
use crate::tensor::{split_axis, Tensor};

/// Probability floor applied before the logarithm in [`Graph::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-30;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    Concat,
    Slice,
    Reshape,
    Transpose,
    BroadcastRows,
    MaxLast,
    MaskedSoftmax,
    CrossEntropy,
    Dropout,
    Sum,
}

impl OpTag {
    pub const ALL: [OpTag; 20] = [
        OpTag::Leaf,
        OpTag::MatMul,
        OpTag::BatchMatMul,
        OpTag::Add,
        OpTag::Sub,
        OpTag::Mul,
        OpTag::Scale,
        OpTag::Tanh,
        OpTag::Sigmoid,
        OpTag::Relu,
        OpTag::Concat,
        OpTag::Slice,
        OpTag::Reshape,
        OpTag::Transpose,
        OpTag::BroadcastRows,
        OpTag::MaxLast,
        OpTag::MaskedSoftmax,
        OpTag::CrossEntropy,
        OpTag::Dropout,
        OpTag::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpTag::Leaf => "leaf",
            OpTag::MatMul => "matmul",
            OpTag::BatchMatMul => "batch_matmul",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Scale => "scale",
            OpTag::Tanh => "tanh",
            OpTag::Sigmoid => "sigmoid",
            OpTag::Relu => "relu",
            OpTag::Concat => "concat",
            OpTag::Slice => "slice",
            OpTag::Reshape => "reshape",
            OpTag::Transpose => "transpose",
            OpTag::BroadcastRows => "broadcast_rows",
            OpTag::MaxLast => "max_last",
            OpTag::MaskedSoftmax => "masked_softmax",
            OpTag::CrossEntropy => "cross_entropy",
            OpTag::Dropout => "dropout",
            OpTag::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    BroadcastRows(Var),
    MaxLast { input: Var, argmax: Vec<usize> },
    MaskedSoftmax(Var),
    CrossEntropy { probs: Var, picks: Vec<Option<usize>> },
    Dropout { input: Var, scale: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul(..) => OpTag::MatMul,
            Op::BatchMatMul(..) => OpTag::BatchMatMul,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::Unary(Unary::Tanh, _) => OpTag::Tanh,
            Op::Unary(Unary::Sigmoid, _) => OpTag::Sigmoid,
            Op::Unary(Unary::Relu, _) => OpTag::Relu,
            Op::Concat { .. } => OpTag::Concat,
            Op::Slice { .. } => OpTag::Slice,
            Op::Reshape(..) => OpTag::Reshape,
            Op::Transpose(..) => OpTag::Transpose,
            Op::BroadcastRows(..) => OpTag::BroadcastRows,
            Op::MaxLast { .. } => OpTag::MaxLast,
            Op::MaskedSoftmax(..) => OpTag::MaskedSoftmax,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
            Op::Dropout { .. } => OpTag::Dropout,
            Op::Sum(..) => OpTag::Sum,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::BroadcastRows(x)
            | Op::MaskedSoftmax(x)
            | Op::Sum(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { input, .. }
            | Op::MaxLast { input, .. }
            | Op::Dropout { input, .. } => vec![*input],
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path connects it to the root.
    pub fn get_opt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`; zeros when `var` did not influence the root.
    pub fn get(&self, var: Var) -> Tensor {
        self.get_opt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpTag>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the backward rule of `tag` by 1.5. Only used to prove that the
    /// gradient checker catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, tag: OpTag) {
        self.fault = Some(tag);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op_tag(&self, var: Var) -> OpTag {
        self.nodes[var.0].op.tag()
    }

    /// First node (in creation order) holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.tag().name()))
    }

    /// Distance from the current point to the nearest non-differentiable
    /// point: the smallest `|x|` over ReLU inputs and the smallest gap between
    /// the two largest entries of any `max_last` row. Infinite if neither op
    /// is present.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary(Unary::Relu, x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxLast { input, .. } => {
                    let t = self.value(*input);
                    let width = *t.shape().last().expect("tensors have rank >= 1");
                    for row in t.data().chunks(width).filter(|r| r.len() > 1) {
                        let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                        for &v in row {
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        margin = margin.min(top - second);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let parents = op.parents();
        debug_assert!(
            parents.iter().any(|p| !self.nodes[p.0].value.is_finite()) || value.is_finite(),
            "{} produced a non-finite value from finite inputs",
            op.tag().name()
        );
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ----------------------------------------------------------------------
    // forward ops

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(QaError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `[B×m×k]·[B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(QaError::Dimension {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(QaError::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let shape = if ta.numel() >= tb.numel() { ta.shape() } else { tb.shape() };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    /// Elementwise sum. Shapes must match unless one side is a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = match kind {
            Unary::Tanh => self.value(x).map(f64::tanh),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Relu => self.value(x).map(|v| if v > 0.0 { v } else { 0.0 }),
        };
        self.push(t, Op::Unary(kind, x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(QaError::Shape {
            op: "concat",
            detail: "no tensors to concatenate".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(QaError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(QaError::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`; rank is preserved.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(QaError::Shape {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            let begin = (o * full + start) * inner;
            out.extend_from_slice(&src[begin..begin + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Slice { input: x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape).map_err(|_| QaError::Dimension {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, cols) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(QaError::Shape {
                    op: "transpose",
                    detail: format!("expected rank 2 or 3, got {shape:?}"),
                })
            }
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Transpose(x)))
    }

    /// Repeats a length-`n` vector as the rows of a `[rows×n]` matrix.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(QaError::Shape {
                op: "broadcast_rows",
                detail: "row count must be positive".into(),
            });
        }
        let src = self.value(x).data();
        let n = src.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::BroadcastRows(x)))
    }

    /// Maximum over the last axis; the result drops that axis.
    pub fn max_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape();
        let width = *shape.last().expect("tensors have rank >= 1");
        let rows = t.numel() / width;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(r * width + best);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Tensor::from_parts(out_shape, out), Op::MaxLast { input: x, argmax })
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(QaError::Dimension {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let width = *t.shape().last().expect("tensors have rank >= 1");
        let rows = t.numel() / width;
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let span = r * width..(r + 1) * width;
            let (logits, keep, probs) = (&t.data()[span.clone()], &mask[span.clone()], &mut out[span]);
            if !keep.iter().any(|&k| k) {
                return Err(QaError::DegenerateMask { row: r });
            }
            // NaN propagates so a poisoned row stays poisoned.
            let max = logits
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
            let mut total = 0.0;
            for j in 0..width {
                if keep[j] {
                    probs[j] = (logits[j] - max).exp();
                    total += probs[j];
                }
            }
            for p in probs.iter_mut() {
                *p /= total;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax(x)))
    }

    /// Batch mean of `-ln p[b, gold_b]` for a `[B×L]` probability matrix.
    pub fn cross_entropy(&mut self, probs: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(probs);
        let (batch, width) = match t.shape() {
            [b, l] => (*b, *l),
            s => {
                return Err(QaError::Shape {
                    op: "cross_entropy",
                    detail: format!("expected [B×L] probabilities, got {s:?}"),
                })
            }
        };
        if gold.len() != batch || mask.len() != batch * width {
            return Err(QaError::Label(format!(
                "{} labels and {} mask entries for a {batch}×{width} batch",
                gold.len(),
                mask.len()
            )));
        }
        let mut total = 0.0;
        let mut picks = Vec::with_capacity(batch);
        for (b, &g) in gold.iter().enumerate() {
            if g >= width {
                return Err(QaError::Label(format!("row {b}: gold index {g} out of range {width}")));
            }
            let idx = b * width + g;
            if !mask[idx] {
                return Err(QaError::Label(format!("row {b}: gold index {g} is masked")));
            }
            let p = t.data()[idx];
            if p > LOG_CLAMP || p.is_nan() {
                total -= p.ln();
                picks.push(Some(idx));
            } else {
                total -= LOG_CLAMP.ln();
                picks.push(None);
            }
        }
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::CrossEntropy { probs, picks },
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(QaError::Config(format!("dropout rate {rate} must be in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out = t.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { input: x, scale }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    // ----------------------------------------------------------------------
    // backward

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(QaError::Shape {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(mut g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            if self.fault == Some(node.op.tag()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], var: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn accumulate_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        factor: impl Fn(usize) -> f64,
    ) {
        let numel = self.value(target).numel();
        if let Some(buf) = self.slot(grads, target) {
            if numel == g.len() {
                for (i, (b, gv)) in buf.iter_mut().zip(g).enumerate() {
                    *b += gv * factor(i);
                }
            } else {
                // scalar operand broadcast over the other side
                buf[0] += g.iter().enumerate().map(|(i, gv)| gv * factor(i)).sum::<f64>();
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(g, bd, m, n, k, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(ad, g, m, k, n, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..bs {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate_binary(grads, *a, g, |_| 1.0);
                self.accumulate_binary(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_binary(grads, *a, g, |_| 1.0);
                self.accumulate_binary(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                self.accumulate_binary(grads, *a, g, |i| pick(bd, i));
                self.accumulate_binary(grads, *b, g, |i| pick(ad, i));
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Unary(kind, x) => {
                let input = self.value(*x).data();
                let out = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..dx.len() {
                        let local = match kind {
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Relu => {
                                if input[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[i] += g[i] * local;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(dp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (d, gv) in dp[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += gv;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let len = node.value.shape()[*axis];
                let (outer, full, inner) = split_axis(self.shape(*input), *axis);
                if let Some(dx) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for (d, gv) in dx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Transpose(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (rows, cols) = (shape[r - 2], shape[r - 1]);
                let batch = node.value.numel() / (rows * cols);
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..batch {
                        let base = b * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                dx[base + i * cols + j] += g[base + j * rows + i];
                            }
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = dx.len();
                    for row in g.chunks_exact(n) {
                        dx.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::MaxLast { input, argmax } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (&idx, gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let width = *node.value.shape().last().expect("rank >= 1");
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..y.len() / width {
                        let span = r * width..(r + 1) * width;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (yv, gv)) in dx[span].iter_mut().zip(yr.iter().zip(gr)) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, picks } => {
                let p = self.value(*probs).data();
                let batch = picks.len() as f64;
                if let Some(dp) = self.slot(grads, *probs) {
                    for idx in picks.iter().flatten() {
                        dp[*idx] -= g[0] / (batch * p[*idx]);
                    }
                }
            }
            Op::Dropout { input, scale } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, (gv, s)) in dx.iter_mut().zip(g.iter().zip(scale)) {
                        *d += gv * s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `out[m×n] += a[m×k]·b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n]·b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ·g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let ai = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let h = g.constant(Tensor::vector(vec![0.5]));
        let t = g.tanh(h);
        assert!((g.value(t).item() - 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn binary_shape_mismatch_is_error_but_scalar_broadcasts() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(3.0));
        let c = g.add(a, s).unwrap();
        assert_eq!(g.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.constant(Tensor::zeros(&[2, 5]));
        let z = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.shape(z), &[2, 8]);

        let w = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.concat(&[x, w], 1).is_err());
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let p = g.masked_softmax(x, &[true, true, true]).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![9.0, 2.0, 7.0]));
        let p = g.masked_softmax(x, &[false, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 0.0]);
        let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let p = g.masked_softmax(x, &[true, true]).unwrap();
        let d = g.value(p).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let err = g.masked_softmax(x, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, QaError::DegenerateMask { row: 1 }));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let onehot = g.constant(mat(1, 3, &[0.0, 1.0, 0.0]));
        let l = g.cross_entropy(onehot, &[1], &[true; 3]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let uniform = g.constant(mat(1, 4, &[0.25; 4]));
        let l = g.cross_entropy(uniform, &[2], &[true; 4]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let p = g.constant(mat(1, 2, &[0.1, 0.9]));
        let l = g.cross_entropy(p, &[0], &[true; 2]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_errors() {
        let mut g = Graph::new();
        let p = g.constant(mat(1, 2, &[0.5, 0.5]));
        assert!(matches!(g.cross_entropy(p, &[2], &[true; 2]), Err(QaError::Label(_))));
        assert!(matches!(g.cross_entropy(p, &[1], &[true, false]), Err(QaError::Label(_))));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut g = Graph::new();
        let p = g.param(mat(1, 2, &[0.0, 1.0]));
        let l = g.cross_entropy(p, &[0], &[true; 2]).unwrap();
        assert!((g.value(l).item() - (-LOG_CLAMP.ln())).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).is_finite());
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[10]));
        assert_eq!(g.dropout(x, 0.7, false, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, true, 1), Err(QaError::Config(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let y = g.dropout(x, 0.5, true, 42).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.get(unused).data(), &[0.0; 4]);
        assert!(grads.get_opt(unused).is_none());

        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let root = g.sum(x);
        assert_eq!(g.backward(root).unwrap().get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(QaError::Shape { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(tanh(x) * x): x feeds two consumers.
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -0.7]));
        let t = g.tanh(x);
        let p = g.mul(t, x).unwrap();
        let y = g.sum(p);
        let grad = g.backward(y).unwrap().get(x);
        for (i, &v) in [0.3f64, -0.7].iter().enumerate() {
            let expected = v.tanh() + v * (1.0 - v.tanh().powi(2));
            assert!((grad.data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get_opt(c).is_none());
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn max_last_and_transpose() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 3, &[1.0, 5.0, 2.0, 7.0, 0.0, 3.0]));
        let m = g.max_last(x);
        assert_eq!(g.value(m).data(), &[5.0, 7.0]);
        let t = g.transpose(x).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1.0, 7.0, 5.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn first_non_finite_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN]));
        let _ = g.scale(x, 2.0);
        assert_eq!(g.first_non_finite(), Some((0, "leaf")));
    }
}
