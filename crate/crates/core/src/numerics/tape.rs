//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena: every operation pushes a node whose
//! inputs are earlier nodes, so node order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use super::kernels::{self, LayerNormStats};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used only to prove that gradient
/// checking catches a broken rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the GELU derivative by 1.01.
    GeluBackward,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        p: usize,
        n: usize,
        b_batched: bool,
    },
    TransposeLast2 {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: LayerNormStats,
    },
    MaskedTopkSoftmax {
        x: Var,
        selections: Vec<Vec<usize>>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        /// Contiguous span contributed by each input per outer index.
        spans: Vec<usize>,
    },
    Select {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        index: usize,
    },
    BroadcastLeading {
        x: Var,
        copies: usize,
    },
    Sum(Var),
    SumLeading {
        x: Var,
        leading: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CvSquared {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Single-threaded; independent tapes may run on
/// different threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Top-k selections recorded by a [`Tape::masked_topk_softmax`] node.
    pub fn selections(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].op {
            Op::MaskedTopkSoftmax { selections, .. } => Some(selections),
            _ => None,
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push_node(value, op, needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[..., m, p] · b[..., p, n]`; `b` may also be a plain `p×n` matrix
    /// shared across `a`'s leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if p != p2 || (b_batched && lead_a != lead_b) {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let data = kernels::matmul(self.data(a), self.data(b), batch, m, p, n, b_batched);
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            p,
            n,
            b_batched,
        };
        Ok(self.push(shape, data, op, &[a, b]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Argument(format!("cannot transpose shape {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let data = kernels::transpose_last2(self.data(x), rows, cols);
        let mut shape = s;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        Ok(self.push(shape, data, Op::TransposeLast2 { x, rows, cols }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a trailing-axis vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(bias) != [w] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(w)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale { x, factor }, &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Gelu(x), &[x])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let w = self.value(x).last_dim();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(w).for_each(kernels::softmax_row);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [w] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (data, stats) = kernels::layer_norm(self.data(x), w, self.data(gamma), self.data(beta), eps);
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm { x, gamma, beta, stats };
        Ok(self.push(shape, data, op, &[x, gamma, beta]))
    }

    /// Per trailing-axis row: keep the `k` largest logits, softmax over them,
    /// zero elsewhere. The selection is constant under differentiation.
    pub fn masked_topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let w = self.value(x).last_dim();
        check_k(k, w)?;
        let mut data = vec![0.0; self.value(x).len()];
        let mut selections = Vec::new();
        for (row, out) in self.data(x).chunks(w).zip(data.chunks_mut(w)) {
            let sel = kernels::top_k(row, k);
            kernels::masked_softmax_row(row, &sel, out);
            selections.push(sel);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::MaskedTopkSoftmax { x, selections }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Argument(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let spans: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &span) in inputs.iter().zip(&spans) {
                data.extend_from_slice(&self.data(v)[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer,
            spans,
        };
        Ok(self.push(shape, data, op, inputs))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::Argument(format!(
                "index {index} on axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * axis_len + index) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let op = Op::Select {
            x,
            outer,
            axis_len,
            inner,
            index,
        };
        Ok(self.push(shape, data, op, &[x]))
    }

    /// Stacks `copies` copies of `x` along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, copies: usize) -> Var {
        let data = self.data(x).repeat(copies);
        let mut shape = vec![copies];
        shape.extend_from_slice(self.shape(x));
        self.push(shape, data, Op::BroadcastLeading { x, copies }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Vec::new(), vec![total], Op::Sum(x), &[x])
    }

    /// Sum over the leading axis.
    pub fn sum_leading(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::Argument("sum_leading on a scalar".into()));
        }
        let leading = s[0];
        let inner = self.value(x).len() / leading;
        let mut data = vec![0.0; inner];
        for chunk in self.data(x).chunks(inner) {
            data.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
        }
        Ok(self.push(s[1..].to_vec(), data, Op::SumLeading { x, leading }, &[x]))
    }

    /// Mean cross-entropy of `logits[B, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = kernels::cross_entropy(self.data(logits), classes, labels);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![loss], op, &[logits]))
    }

    /// `(σ/(μ+eps))²` of a vector, population σ; zero for fewer than two entries.
    pub fn cv_squared(&mut self, x: Var, eps: f64) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::Argument(format!(
                "cv_squared expects a vector, got {:?}",
                self.shape(x)
            )));
        }
        let (value, grad) = kernels::cv_squared(self.data(x), eps);
        Ok(self.push(Vec::new(), vec![value], Op::CvSquared { x, grad }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Propagates `∂loss/∂·` to every gradient-requiring leaf reachable from
    /// `loss`, adding into existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = Vec::new();
        adjoint.resize_with(loss.0 + 1, || None);
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                adjoint: &mut adjoint,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    p,
                    n,
                    b_batched,
                } => {
                    let (da, db) = kernels::matmul_backward(sink.data(a), sink.data(b), &g, batch, m, p, n, b_batched);
                    sink.add(a, da);
                    sink.add(b, db);
                }
                &Op::TransposeLast2 { x, rows, cols } => {
                    // output block is cols×rows
                    sink.add(x, kernels::transpose_last2(&g, cols, rows));
                }
                &Op::Add(a, b) => {
                    sink.add(a, g.clone());
                    sink.add(b, g);
                }
                &Op::AddBias { x, bias } => {
                    let w = sink.data(bias).len();
                    let mut db = vec![0.0; w];
                    for row in g.chunks(w) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    sink.add(x, g);
                    sink.add(bias, db);
                }
                &Op::Mul(a, b) => {
                    let da = g.iter().zip(sink.data(b)).map(|(g, v)| g * v).collect();
                    let db = g.iter().zip(sink.data(a)).map(|(g, v)| g * v).collect();
                    sink.add(a, da);
                    sink.add(b, db);
                }
                &Op::Scale { x, factor } => {
                    sink.add(x, g.iter().map(|v| v * factor).collect());
                }
                &Op::Gelu(x) => {
                    let skew = if self.fault == Some(Fault::GeluBackward) {
                        1.01
                    } else {
                        1.0
                    };
                    let dx = g
                        .iter()
                        .zip(sink.data(x))
                        .map(|(g, &v)| g * kernels::gelu_derivative(v) * skew)
                        .collect();
                    sink.add(x, dx);
                }
                &Op::Softmax(x) => {
                    let w = node.value.last_dim();
                    let mut dx = vec![0.0; g.len()];
                    for ((y, dy), d) in node.value.data().chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                        kernels::softmax_row_backward(y, dy, d);
                    }
                    sink.add(x, dx);
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let w = node.value.last_dim();
                    let (dx, dgamma, dbeta) = kernels::layer_norm_backward(&g, w, sink.data(*gamma), stats);
                    sink.add(*x, dx);
                    sink.add(*gamma, dgamma);
                    sink.add(*beta, dbeta);
                }
                Op::MaskedTopkSoftmax { x, selections } => {
                    let w = node.value.last_dim();
                    let y = node.value.data();
                    let mut dx = vec![0.0; g.len()];
                    for (r, sel) in selections.iter().enumerate() {
                        let off = r * w;
                        let dot: f64 = sel.iter().map(|&j| y[off + j] * g[off + j]).sum();
                        for &j in sel {
                            dx[off + j] = y[off + j] * (g[off + j] - dot);
                        }
                    }
                    sink.add(*x, dx);
                }
                &Op::Reshape(x) => sink.add(x, g),
                Op::Concat { inputs, outer, spans } => {
                    let stride: usize = spans.iter().sum();
                    let mut offset = 0;
                    for (&v, &span) in inputs.iter().zip(spans) {
                        let mut dv = Vec::with_capacity(outer * span);
                        for o in 0..*outer {
                            let start = o * stride + offset;
                            dv.extend_from_slice(&g[start..start + span]);
                        }
                        sink.add(v, dv);
                        offset += span;
                    }
                }
                &Op::Select {
                    x,
                    outer,
                    axis_len,
                    inner,
                    index,
                } => {
                    let mut dx = vec![0.0; outer * axis_len * inner];
                    for o in 0..outer {
                        let start = (o * axis_len + index) * inner;
                        dx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                    sink.add(x, dx);
                }
                &Op::BroadcastLeading { x, copies } => {
                    let inner = g.len() / copies;
                    let mut dx = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        dx.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    sink.add(x, dx);
                }
                &Op::Sum(x) => {
                    let n = sink.data(x).len();
                    sink.add(x, vec![g[0]; n]);
                }
                &Op::SumLeading { x, leading } => {
                    sink.add(x, g.repeat(leading));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &l) in labels.iter().enumerate() {
                        dx[b * classes + l] -= scale;
                    }
                    sink.add(*logits, dx);
                }
                Op::CvSquared { x, grad } => {
                    sink.add(*x, grad.iter().map(|v| v * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    adjoint: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn add(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.adjoint[v.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot => *slot = Some(delta),
        }
    }
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in [1, {n}]")));
    }
    Ok(())
}
