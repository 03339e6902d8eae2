//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated eagerly. Nodes are
//! appended in evaluation order, so the node vector is already a topological
//! order and [`Graph::backward`] simply walks it in reverse. Parameters are
//! borrowed from a [`ParamStore`] rather than copied into the graph.
//!
//! All reductions run left to right, which makes forward values and gradients
//! bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

static EMPTY_STORE: ParamStore = ParamStore::new();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, row_start: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Slice { a: NodeId, start: usize, len: usize },
    Index { a: NodeId, index: usize },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Primitive kinds accepted by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Concat,
    Tanh,
    Sigmoid,
    Mul,
    Softmax,
    Log,
    Mean,
    Slice { start: usize, len: usize },
}

/// A computation graph over tensors and borrowed parameters.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    params: Vec<Option<Tensor>>,
    leaves: Vec<(NodeId, Tensor)>,
}

impl GradientMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: store
                .iter()
                .map(|(_, _, t)| Some(Tensor::zeros(t.shape())))
                .collect(),
            leaves: Vec::new(),
        }
    }

    /// Gradient of a parameter, if it was reachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf input created with `requires_grad = true`.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.leaves.iter().find(|(n, _)| *n == node).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (ParamId(i), t)))
    }

    /// Elementwise `self += other`, parameter by parameter in id order.
    pub fn accumulate(&mut self, other: &GradientMap) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => {
                    for (a, b) in m.data_mut().iter_mut().zip(theirs.data()) {
                        *a += b;
                    }
                }
                None => *mine = Some(theirs.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for t in self.params.iter().flatten() {
            for v in t.data() {
                sq += v * v;
            }
        }
        sq.sqrt()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn inner_size(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            z += *y;
        }
        for y in yr.iter_mut() {
            *y /= z;
        }
    }
}

fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in xr {
            z += (v - max).exp();
        }
        let lse = max + z.ln();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
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

impl Graph<'static> {
    /// A graph with no parameters attached.
    pub fn standalone() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(p),
            _ => node.value.as_ref().expect("non-parameter nodes own a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf input. Gradients are reported for it when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value, false)
    }

    /// The graph node for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Dispatch by primitive kind.
    pub fn apply(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            Primitive::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            Primitive::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            Primitive::Log => {
                arity(1)?;
                Ok(self.log(inputs[0]))
            }
            Primitive::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            Primitive::Slice { start, len } => {
                arity(1)?;
                self.slice(inputs[0], start, len)
            }
        }
    }

    /// Matrix product with numpy-style treatment of 1-D operands
    /// (a row vector on the left, a column vector on the right).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let rows = match self.value(b).shape() {
            [k] => *k,
            [k, _] => *k,
            _ => return Err(shape_err("matmul", self.value(a), self.value(b))),
        };
        let k = *self.value(a).shape().last().unwrap_or(&0);
        if k != rows {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        self.matmul_band(a, b, 0)
    }

    /// `a · b[row_start .. row_start + k, :]` where `k` is the inner extent
    /// of `a`. Equivalent to multiplying `a` by a row band of `b`, which is
    /// how a concatenated input is split into independently computed parts.
    pub fn matmul_band(&mut self, a: NodeId, b: NodeId, row_start: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, a_vec) = match av.shape() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err("matmul", av, bv)),
        };
        let (n, b_vec) = match bv.shape() {
            [_] if row_start == 0 => (1, true),
            [_, n] => (*n, false),
            _ => return Err(shape_err("matmul", av, bv)),
        };
        if row_start + k > bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let band = &bv.data()[row_start * n..(row_start + k) * n];
        let mut out = vec![0.0; m * n];
        mm_acc(av.data(), band, &mut out, m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, row_start },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
        } else if bv.shape().len() == 1 && av.shape().len() == 2 && last_dim(av) == bv.len() {
            let n = bv.len();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % n])
                .collect()
        } else {
            return Err(shape_err("add", av, bv));
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av, bv));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("elementwise_mul", av, bv));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let tail: Vec<usize> = self.value(first).shape().iter().skip(1).cloned().collect();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.value(first), v));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        softmax_rows(av.data(), last_dim(av), &mut out);
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        log_softmax_rows(av.data(), last_dim(av), &mut out);
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = 0.0;
        for v in self.value(a).data() {
            s += v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut s = 0.0;
        for v in av.data() {
            s += v;
        }
        let m = s / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Rows `start .. start + len` along the first axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().is_empty() || len == 0 || start + len > av.shape()[0] {
            return Err(Error::Shape {
                op: "slice",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let inner = inner_size(av.shape());
        let data = av.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = av.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { a, start, len },
            rg,
        ))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn index(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 1 || index >= av.len() {
            return Err(Error::Shape {
                op: "index",
                lhs: av.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let v = av.data()[index];
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Index { a, index }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = av.data().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(a),
            rg,
        ))
    }

    /// Reverse-mode gradients of a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradientMap {
            params: vec![None; self.params.len()],
            leaves: Vec::new(),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    let shape = self.value(NodeId(idx)).shape().to_vec();
                    out.leaves
                        .push((NodeId(idx), Tensor::from_parts(shape, g)));
                }
                Op::Param(p) => {
                    let shape = self.params.get(*p).shape().to_vec();
                    out.params[p.0] = Some(Tensor::from_parts(shape, g));
                }
                op => self.backprop(op, idx, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.value(id).len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, op: &Op, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.value(NodeId(idx));
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, row_start } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = last_dim(av);
                let m = av.len() / k;
                let n = if bv.shape().len() == 1 { 1 } else { bv.shape()[1] };
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let band = &bv.data()[row_start * n..(row_start + k) * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gi, &band[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    let band = &mut gb[row_start * n..(row_start + k) * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, gv) in band[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    let n = gb.len();
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += gv * x;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        for (o, gv) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av.data()) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av.data()) {
                        *o += gv / x;
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = last_dim(y);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gar, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let s = dot(gr, yr);
                        for ((o, gv), yv) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = last_dim(y);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gar, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let mut s = 0.0;
                        for gv in gr {
                            s += gv;
                        }
                        for ((o, gv), yv) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let d = g[0] / ga.len() as f64;
                    for o in ga.iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::Slice { a, start, len } => {
                let inner = inner_size(self.value(*a).shape());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let dst = &mut ga[start * inner..(start + len) * inner];
                    for (o, gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Index { a, index } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga[*index] += g[0];
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of `loss_fn` against central finite
/// differences, one scalar parameter at a time. An empty `ids` checks every
/// parameter of the store.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    check_epsilon(epsilon)?;
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        finite_loss(g.scalar(loss))?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        finite_loss(g.scalar(loss))
    };
    compare_entries(store, ids, epsilon, &analytic, eval, |plus, minus| plus - minus)
}

/// One summand `weight · (−log softmax(logits)[target])` of a cross-entropy loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropyTerm {
    pub logits: NodeId,
    pub target: usize,
    pub weight: f64,
}

/// Gradient check for a loss that is a weighted sum of cross-entropies.
///
/// The loss difference `ℒ(w+ε) − ℒ(w−ε)` is accumulated term by term from
/// logit differences, with the log-sum-exp change evaluated as
/// `ln(1 + Σ pᵢ·(exp(Δᵢ) − 1))`. This keeps the rounding error of a large
/// loss value out of the difference, so entries with gradients near the
/// `1e-8` floor stay measurable.
pub fn grad_check_cross_entropy<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    terms_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Vec<CrossEntropyTerm>>,
{
    check_epsilon(epsilon)?;
    let analytic = {
        let mut g = Graph::new(store);
        let terms = terms_fn(&mut g)?;
        if terms.is_empty() {
            return Err(Error::Invalid("cross-entropy check without terms".into()));
        }
        let mut total: Option<NodeId> = None;
        for t in &terms {
            let ls = g.log_softmax(t.logits);
            let lp = g.index(ls, t.target)?;
            let term = g.scale(lp, -t.weight);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let total = total.expect("non-empty");
        finite_loss(g.scalar(total))?;
        g.backward(total)?
    };
    let eval = |store: &ParamStore| -> Result<Vec<(Vec<f64>, usize, f64)>> {
        let mut g = Graph::new(store);
        let terms = terms_fn(&mut g)?;
        let mut out = Vec::with_capacity(terms.len());
        for t in terms {
            let z = g.value(t.logits).data().to_vec();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("logits are not finite".into()));
            }
            out.push((z, t.target, t.weight));
        }
        Ok(out)
    };
    compare_entries(store, ids, epsilon, &analytic, eval, |plus, minus| {
        assert_eq!(plus.len(), minus.len(), "term count changed under perturbation");
        let mut delta = 0.0;
        for ((zp, target, weight), (zm, _, _)) in plus.iter().zip(minus) {
            let max = zm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            let mut acc = 0.0;
            for (a, b) in zp.iter().zip(zm) {
                let p = (b - max).exp();
                norm += p;
                acc += p * (a - b).exp_m1();
            }
            let lse_change = (acc / norm).ln_1p();
            delta += weight * (lse_change - (zp[*target] - zm[*target]));
        }
        delta
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    Ok(())
}

fn finite_loss(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v}")))
    }
}

fn compare_entries<T>(
    store: &mut ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    analytic: &GradientMap,
    eval: impl Fn(&ParamStore) -> Result<T>,
    difference: impl Fn(&T, &T) -> f64,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = if ids.is_empty() {
        store.ids().collect()
    } else {
        ids.to_vec()
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + epsilon;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - epsilon;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = difference(&plus?, &minus?) / (2.0 * epsilon);
            let a = analytic.param(id).map_or(0.0, |t| t.data()[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((store.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_in(g: &mut Graph, v: &[f64]) -> NodeId {
        g.input(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::standalone();
        let eye = g.constant(Tensor::eye(3));
        let x = vec_in(&mut g, &[1.5, -2.0, 0.25]);
        let y = g.apply(Primitive::MatMul, &[eye, x]).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25]);
        assert_eq!(g.value(y).shape(), &[3]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::standalone();
        let z = vec_in(&mut g, &[0.0, 0.0]);
        let s = g.apply(Primitive::Softmax, &[z]).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_vectors() {
        let mut g = Graph::standalone();
        let a = vec_in(&mut g, &[1.0, 2.0]);
        let b = vec_in(&mut g, &[3.0]);
        let c = g.apply(Primitive::Concat, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::standalone();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        let err = g.mul(a, c).unwrap_err().to_string();
        assert!(err.contains("elementwise_mul"), "{err}");
    }

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::standalone();
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::standalone();
        let z = vec_in(&mut g, &[0.3, -1.2, 2.0, 0.7]);
        let s = g.softmax(z);
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        for v in grads.wrt(z).unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::standalone();
        let z = vec_in(&mut g, &[1.0, 2.0]);
        assert!(g.backward(z).is_err());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::standalone();
        let z = vec_in(&mut g, &[0.1, 0.2, 0.3]);
        let t = g.tanh(z);
        let l = g.log_softmax(t);
        let s = g.sum(l);
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matmul_band_equals_concat_product() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::matrix(5, 2, (0..10).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap(),
        );
        let mut g = Graph::new(&store);
        let wn = g.param(w);
        let a = vec_in(&mut g, &[1.0, -2.0]);
        let b = vec_in(&mut g, &[0.5, 0.25, 4.0]);
        let ab = g.concat(&[a, b]).unwrap();
        let full = g.matmul(ab, wn).unwrap();
        let pa = g.matmul_band(a, wn, 0).unwrap();
        let pb = g.matmul_band(b, wn, 2).unwrap();
        let parts = g.add(pa, pb).unwrap();
        for (x, y) in g.value(full).data().iter().zip(g.value(parts).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        let r = grad_check(&mut store, &[], 1e-2, |g| {
            let w = g.param(ParamId(0));
            Ok(g.sum(w))
        });
        assert!(r.is_err());
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![-1.0]));
        let r = grad_check(&mut store, &[], 1e-5, |g| {
            let w = g.param(ParamId(0));
            let l = g.log(w);
            Ok(g.sum(l))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
