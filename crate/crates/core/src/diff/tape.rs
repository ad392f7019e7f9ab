use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{input_err, shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head scaled dot-product attention node.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`.
/// `key_mask[b * k_len + j]` marks key `j` of sequence `b` as attendable.
/// A query with no attendable key produces a zero row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
}

/// Primitive operations a tape can record.
#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(ParamId),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[.., n] + [n]`, broadcasting the vector over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    /// Tanh-approximated GELU.
    Gelu(Var),
    /// `[.., k] x [k, n]`.
    MatMul(Var, Var),
    /// Row lookup: embeddings, row selection and row broadcasting.
    Gather(Var, Vec<usize>),
    /// Column-wise concatenation.
    Concat(Vec<Var>),
    /// Columns `start..end`.
    Slice(Var, usize, usize),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    Attention(Var, Var, Var, Box<AttentionSpec>),
    Sum(Var),
    Mean(Var),
    /// `sum_r weight[r] * -log softmax(logits[r])[target[r]]`.
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::MatMul(..) => "matmul",
            Op::Gather(..) => "gather",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Attention(..) => "attention",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Gather(a, _)
            | Op::Slice(a, ..)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CrossEntropy(a, ..) => vec![*a],
            Op::Concat(vs) => vs.clone(),
            Op::LayerNorm(a, b, c) | Op::Attention(a, b, c, _) => vec![*a, *b, *c],
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param(_) | Op::Constant)
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific forward intermediates reused by the backward pass.
    saved: Vec<f64>,
    needs_grad: bool,
}

/// A recorded computation.
///
/// Operations are evaluated eagerly as they are recorded, so the tape is
/// always topologically ordered. The same record can be re-evaluated with
/// new leaf values through [`Tape::forward_eval`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inputs: HashMap<String, Var>,
    outputs: HashMap<String, Var>,
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Registers a named, differentiable input.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.inputs.contains_key(name) {
            return input_err(format!("input {name} already bound"));
        }
        let v = self.push_leaf(Op::Input(name.to_string()), value, true);
        self.inputs.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Constant, value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(Op::Param(id), store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).copied()
    }

    pub fn set_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|&v| self.value(v))
    }

    /// Parameter leaves in parameter order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort();
        out
    }

    /// Named input leaves, sorted by name.
    pub fn input_vars(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self.inputs.iter().map(|(n, &v)| (n.clone(), v)).collect();
        out.sort();
        out
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            saved: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let index = self.nodes.len();
        let (value, saved) = compute(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            needs_grad,
        });
        Ok(Var(index))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather(table, rows))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice(a, start, end))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.push(Op::LayerNorm(x, gamma, beta))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.push(Op::Attention(q, k, v, Box::new(spec)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets, weights))
    }

    /// Rebinds named inputs and re-evaluates every node in order.
    pub fn forward_eval(&mut self, inputs: &[(&str, Tensor)]) -> Result<()> {
        for (name, value) in inputs {
            let v = self
                .input_var(name)
                .ok_or_else(|| Error::Input(format!("record has no input named {name}")))?;
            let slot = &mut self.nodes[v.0].value;
            if slot.shape() != value.shape() {
                return shape_err(format!(
                    "input {name} was recorded with shape {:?}, got {:?}",
                    slot.shape(),
                    value.shape()
                ));
            }
            *slot = value.clone();
        }
        self.replay_from(0)
    }

    /// Copies current parameter values into the parameter leaves and replays.
    pub fn refresh_params(&mut self, store: &ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            self.nodes[v.0].value = store.get(id).clone();
        }
        self.replay_from(0)
    }

    pub(crate) fn leaf_value_mut(&mut self, v: Var) -> &mut Tensor {
        debug_assert!(self.nodes[v.0].op.is_leaf());
        &mut self.nodes[v.0].value
    }

    pub(crate) fn replay_from(&mut self, start: usize) -> Result<()> {
        for i in start..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let (value, saved) = compute(&node.op, before)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.op.is_leaf() || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.len()])
            };
        }
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Constant => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        axpy(slot!(v), sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        axpy(slot!(v), sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = val(*b);
                    for ((s, gi), o) in slot!(a).iter_mut().zip(g).zip(other) {
                        *s += gi * o;
                    }
                }
                if needs(*b) {
                    let other = val(*a);
                    for ((s, gi), o) in slot!(b).iter_mut().zip(g).zip(other) {
                        *s += gi * o;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    axpy(slot!(a), 1.0, g);
                }
                if needs(*r) {
                    let n = nodes[r.0].value.len();
                    let s = slot!(r);
                    for row in g.chunks_exact(n) {
                        axpy(s, 1.0, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(slot!(a), *c, g);
                }
            }
            Op::AddScalar(a, _) => {
                if needs(*a) {
                    axpy(slot!(a), 1.0, g);
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                for ((s, gi), yi) in slot!(a).iter_mut().zip(g).zip(y) {
                    *s += gi * yi;
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                let s = slot!(a);
                for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                    *s += gi / xi;
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                for ((s, gi), yi) in slot!(a).iter_mut().zip(g).zip(y) {
                    *s += gi * (1.0 - yi * yi);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let s = slot!(a);
                for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let s = slot!(a);
                for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                    *s += gi * gelu_grad(*xi);
                }
            }
            Op::MatMul(a, b) => {
                let at = &nodes[a.0].value;
                let bt = &nodes[b.0].value;
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if needs(*a) {
                    let bd = bt.data();
                    kernels::matmul_nt_acc(g, bd, m, n, k, slot!(a));
                }
                if needs(*b) {
                    let ad = at.data();
                    kernels::matmul_tn_acc(ad, g, m, k, n, slot!(b));
                }
            }
            Op::Gather(t, rows) => {
                if needs(*t) {
                    let c = nodes[t.0].value.cols();
                    let s = slot!(t);
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(&mut s[src * c..(src + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if needs(p) {
                        let s = slot!(p);
                        for r in 0..rows {
                            axpy(
                                &mut s[r * c..(r + 1) * c],
                                1.0,
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice(a, start, end) => {
                let c = nodes[a.0].value.cols();
                let w = end - start;
                let s = slot!(a);
                for (r, grow) in g.chunks_exact(w).enumerate() {
                    axpy(&mut s[r * c + start..r * c + end], 1.0, grow);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let s = slot!(a);
                for ((srow, grow), yrow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let dot = kernels::dot(grow, yrow);
                    for ((si, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                        *si += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let (xhat, rstd) = node.saved.split_at(rows * c);
                if needs(*beta) {
                    let s = slot!(beta);
                    for grow in g.chunks_exact(c) {
                        axpy(s, 1.0, grow);
                    }
                }
                if needs(*gamma) {
                    let s = slot!(gamma);
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((si, gi), hi) in s.iter_mut().zip(grow).zip(hrow) {
                            *si += gi * hi;
                        }
                    }
                }
                if needs(*x) {
                    let gam = val(*gamma);
                    let s = slot!(x);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = kernels::dot(&dxhat, hrow) / c as f64;
                        let srow = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            srow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention(q, k, v, spec) => {
                let mut dq = needs(*q).then(|| vec![0.0; nodes[q.0].value.len()]);
                let mut dk = needs(*k).then(|| vec![0.0; nodes[k.0].value.len()]);
                let mut dv = needs(*v).then(|| vec![0.0; nodes[v.0].value.len()]);
                kernels::attention_backward(
                    spec,
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.saved,
                    g,
                    node.value.cols(),
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        axpy(slot!(var), 1.0, &d);
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                for s in slot!(a).iter_mut() {
                    *s += g0;
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                let g0 = g[0] / n;
                for s in slot!(a).iter_mut() {
                    *s += g0;
                }
            }
            Op::CrossEntropy(logits, targets, weights) => {
                let c = nodes[logits.0].value.cols();
                let probs = &node.saved;
                let s = slot!(logits);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let srow = &mut s[r * c..(r + 1) * c];
                    axpy(srow, scale, &probs[r * c..(r + 1) * c]);
                    srow[t] -= scale;
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn compute(op: &Op, nodes: &[Node]) -> Result<(Tensor, Vec<f64>)> {
    let t = |v: &Var| &nodes[v.0].value;
    let plain = |x: Tensor| Ok((x, Vec::new()));
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant => {
            unreachable!("leaves are not computed")
        }
        Op::Add(a, b) => {
            same_shape("add", t(a), t(b))?;
            plain(zip(t(a), t(b), |x, y| x + y))
        }
        Op::Sub(a, b) => {
            same_shape("sub", t(a), t(b))?;
            plain(zip(t(a), t(b), |x, y| x - y))
        }
        Op::Mul(a, b) => {
            same_shape("mul", t(a), t(b))?;
            plain(zip(t(a), t(b), |x, y| x * y))
        }
        Op::AddRow(a, r) => {
            let (a, r) = (t(a), t(r));
            if r.len() != a.cols() {
                return shape_err(format!(
                    "add_row: row of {} values against {} columns",
                    r.len(),
                    a.cols()
                ));
            }
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(r.len()) {
                axpy(row, 1.0, r.data());
            }
            plain(Tensor::from_parts(a.shape().to_vec(), out))
        }
        Op::Scale(a, c) => plain(map(t(a), |x| x * c)),
        Op::AddScalar(a, c) => plain(map(t(a), |x| x + c)),
        Op::Exp(a) => plain(map(t(a), f64::exp)),
        Op::Log(a) => plain(map(t(a), f64::ln)),
        Op::Tanh(a) => plain(map(t(a), f64::tanh)),
        Op::Relu(a) => plain(map(t(a), |x| x.max(0.0))),
        Op::Gelu(a) => plain(map(t(a), gelu)),
        Op::MatMul(a, b) => {
            let (a, b) = (t(a), t(b));
            if b.shape().len() != 2 || a.cols() != b.shape()[0] {
                return shape_err(format!(
                    "matmul: cannot multiply {:?} by {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            plain(Tensor::from_parts(shape, out))
        }
        Op::Gather(table, rows) => {
            let table = t(table);
            let (nr, c) = (table.rows(), table.cols());
            if rows.is_empty() {
                return shape_err("gather: empty index list");
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= nr {
                    return shape_err(format!("gather: row {r} out of range for {nr} rows"));
                }
                out.extend_from_slice(table.row(r));
            }
            plain(Tensor::from_parts(vec![rows.len(), c], out))
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return shape_err("concat: no inputs");
            }
            let rows = t(&parts[0]).rows();
            if parts.iter().any(|p| t(p).rows() != rows) {
                return shape_err("concat: inputs have different row counts");
            }
            let total: usize = parts.iter().map(|p| t(p).cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(t(p).row(r));
                }
            }
            plain(Tensor::from_parts(vec![rows, total], out))
        }
        Op::Slice(a, start, end) => {
            let a = t(a);
            if start >= end || *end > a.cols() {
                return shape_err(format!(
                    "slice: columns {start}..{end} invalid for width {}",
                    a.cols()
                ));
            }
            let mut out = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                out.extend_from_slice(&a.row(r)[*start..*end]);
            }
            plain(Tensor::from_parts(vec![a.rows(), end - start], out))
        }
        Op::Softmax(a) => {
            let a = t(a);
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(a.cols()) {
                kernels::softmax_in_place(row);
            }
            plain(Tensor::from_parts(a.shape().to_vec(), out))
        }
        Op::LayerNorm(x, gamma, beta) => {
            let (x, gamma, beta) = (t(x), t(gamma), t(beta));
            let c = x.cols();
            if gamma.len() != c || beta.len() != c {
                return shape_err(format!(
                    "layer_norm: affine parameters must have {c} entries"
                ));
            }
            let rows = x.rows();
            let mut out = vec![0.0; rows * c];
            let mut saved = vec![0.0; rows * c + rows];
            let (xhat, rstd) = saved.split_at_mut(rows * c);
            for r in 0..rows {
                let xr = x.row(r);
                let mean = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gamma.data()[j] + beta.data()[j];
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), saved))
        }
        Op::Attention(q, k, v, spec) => {
            let (q, k, v) = (t(q), t(k), t(v));
            let d = q.cols();
            if k.cols() != d || v.cols() != d {
                return shape_err("attention: q, k, v widths differ");
            }
            if spec.heads == 0 || d % spec.heads != 0 {
                return shape_err(format!("attention: width {d} not divisible by {} heads", spec.heads));
            }
            if q.rows() != spec.batch * spec.q_len || k.rows() != spec.batch * spec.k_len || v.rows() != k.rows() {
                return shape_err(format!(
                    "attention: rows q={} k={} v={} do not match batch {} x ({}, {})",
                    q.rows(),
                    k.rows(),
                    v.rows(),
                    spec.batch,
                    spec.q_len,
                    spec.k_len
                ));
            }
            if spec.causal && spec.q_len != spec.k_len {
                return shape_err("attention: causal masking needs q_len == k_len");
            }
            if let Some(m) = &spec.key_mask {
                if m.len() != spec.batch * spec.k_len {
                    return shape_err("attention: key mask length mismatch");
                }
            }
            let (out, probs) = kernels::attention_forward(spec, q.data(), k.data(), v.data(), d);
            Ok((Tensor::from_parts(q.shape().to_vec(), out), probs))
        }
        Op::Sum(a) => plain(Tensor::scalar(t(a).data().iter().sum())),
        Op::Mean(a) => {
            let a = t(a);
            plain(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        }
        Op::CrossEntropy(logits, targets, weights) => {
            let logits = t(logits);
            let (rows, c) = (logits.rows(), logits.cols());
            if targets.len() != rows || weights.len() != rows {
                return shape_err(format!(
                    "cross_entropy: {rows} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ));
            }
            let mut probs = vec![0.0; rows * c];
            let mut loss = 0.0;
            for r in 0..rows {
                if weights[r] == 0.0 {
                    continue;
                }
                let target = targets[r];
                if target >= c {
                    return input_err(format!("cross_entropy: target {target} >= vocabulary {c}"));
                }
                let row = logits.row(r);
                let p = &mut probs[r * c..(r + 1) * c];
                p.copy_from_slice(row);
                let lse = kernels::softmax_in_place(p);
                loss += weights[r] * (lse - row[target]);
            }
            Ok((Tensor::scalar(loss), probs))
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// One gradient per stored parameter, zero for parameters absent from
    /// the tape or unreached by the loss.
    pub fn for_params(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for (id, v) in tape.param_vars() {
            if let Some(g) = &self.grads[v.0] {
                out[id.index()] = Tensor::from_parts(store.get(id).shape().to_vec(), g.clone());
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
