//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Every op appends a node holding its forward value; node ids are handed out
//! in creation order, so inputs always precede their consumers and a reverse
//! sweep over ids is a valid reverse topological order.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + bias` with a `1 x n` bias broadcast across rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * a + shift`
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ConcatCols(NodeId, NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    SoftmaxRows(NodeId),
    /// Sum over rows of `-ln p[row, target]`; rows with `None` are skipped.
    CrossEntropy {
        probs: NodeId,
        targets: Vec<Option<usize>>,
    },
    Attention {
        query: NodeId,
        keys: Vec<NodeId>,
        weights: Matrix,
    },
    /// Scalar whose derivative w.r.t. `input` was computed by the caller.
    Custom {
        input: NodeId,
        local_grad: Matrix,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Affine(a, _) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Sum(a) | Op::SoftmaxRows(a) => {
                vec![*a]
            }
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Attention { query, keys, .. } => {
                let mut v = vec![*query];
                v.extend(keys.iter().copied());
                v
            }
            Op::Custom { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of its shape when the node is not on the
    /// path to the loss.
    pub fn get_or_zeros(&self, id: NodeId) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take_or_zeros(&mut self, id: NodeId) -> Matrix {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Attention weights (`batch x positions`) recorded by an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&Matrix> {
        match &self.nodes[id.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn check(&self, id: NodeId) -> Result<&Matrix> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::structural(format!("node {} not on this tape", id.0)))
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<NodeId> {
        value.ensure_finite(self.op_name(&op))?;
        let needs_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn op_name(&self, op: &Op) -> &'static str {
        match op {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Custom { .. } => "custom",
        }
    }

    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Param, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.matmul(self.check(b)?)?;
        self.push(Op::MatMul(a, b), value)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        if va.same_shape(vb) {
            Ok(())
        } else {
            Err(Error::structural(format!(
                "{what}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.check(a)?, self.check(bias)?);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::structural(format!(
                "add_row: {:?} with bias {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        let b = vb.row(0);
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), value)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let value = self.check(a)?.map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        if va.rows() != vb.rows() {
            return Err(Error::structural("concat_cols: row counts differ"));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let value = Matrix::from_fn(va.rows(), ca + cb, |r, c| {
            if c < ca {
                va.get(r, c)
            } else {
                vb.get(r, c - ca)
            }
        });
        self.push(Op::ConcatCols(a, b), value)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.check(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::structural(format!(
                "gather id {bad} out of range for {} rows",
                vt.rows()
            )));
        }
        let mut value = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(vt.row(id));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::scalar(self.check(a)?.sum());
        self.push(Op::Sum(a), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut value = self.check(a)?.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    /// Sum over rows of `-ln probs[row, target]`, skipping rows whose target
    /// is `None`.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let vp = self.check(probs)?;
        if targets.len() != vp.rows() {
            return Err(Error::structural("cross_entropy: one target per row"));
        }
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vp.cols() {
                    return Err(Error::structural("cross_entropy: target out of range"));
                }
                total -= vp.get(r, t).ln();
            }
        }
        self.push(
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            Matrix::scalar(total),
        )
    }

    /// Bilinear-free dot attention: for each row `b`, scores `query[b] .
    /// keys[s][b]` over positions `s` where `mask[b][s]` holds, softmax, and
    /// the weighted sum of keys. Callers apply any score matrix to `query`.
    pub fn attention(
        &mut self,
        query: NodeId,
        keys: &[NodeId],
        mask: &[Vec<bool>],
    ) -> Result<NodeId> {
        let q = self.check(query)?;
        let (batch, width) = q.shape();
        if keys.is_empty() {
            return Err(Error::structural("attention over zero positions"));
        }
        for &k in keys {
            if self.check(k)?.shape() != (batch, width) {
                return Err(Error::structural("attention: key shape differs from query"));
            }
        }
        if mask.len() != batch || mask.iter().any(|m| m.len() != keys.len()) {
            return Err(Error::structural("attention: mask must be batch x positions"));
        }
        let mut weights = Matrix::zeros(batch, keys.len());
        let mut context = Matrix::zeros(batch, width);
        for b in 0..batch {
            if !mask[b].iter().any(|&m| m) {
                return Err(Error::structural(format!("attention row {b} fully masked")));
            }
            let qb = q.row(b);
            let mut max = f64::NEG_INFINITY;
            for (s, &k) in keys.iter().enumerate() {
                if mask[b][s] {
                    let score: f64 = qb.iter().zip(self.value(k).row(b)).map(|(x, y)| x * y).sum();
                    weights.set(b, s, score);
                    max = max.max(score);
                }
            }
            let mut total = 0.0;
            for s in 0..keys.len() {
                let w = if mask[b][s] {
                    (weights.get(b, s) - max).exp()
                } else {
                    0.0
                };
                weights.set(b, s, w);
                total += w;
            }
            for (s, &k) in keys.iter().enumerate() {
                let w = weights.get(b, s) / total;
                weights.set(b, s, w);
                if w != 0.0 {
                    for (c, &kv) in context.row_mut(b).iter_mut().zip(self.value(k).row(b)) {
                        *c += w * kv;
                    }
                }
            }
        }
        weights.ensure_finite("attention weights")?;
        self.push(
            Op::Attention {
                query,
                keys: keys.to_vec(),
                weights,
            },
            context,
        )
    }

    /// A scalar node with value `value` whose gradient w.r.t. `input` is
    /// `local_grad`. Used for losses with hand-derived derivatives.
    pub fn custom_scalar(&mut self, input: NodeId, value: f64, local_grad: Matrix) -> Result<NodeId> {
        if !self.check(input)?.same_shape(&local_grad) {
            return Err(Error::structural("custom_scalar: gradient shape differs from input"));
        }
        local_grad.ensure_finite("custom_scalar gradient")?;
        self.push(Op::Custom { input, local_grad }, Matrix::scalar(value))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.shape() != (1, 1) {
            return Err(Error::structural(format!(
                "backward from non-scalar node {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::structural(format!(
                        "node {id} consumes node {} which does not precede it",
                        input.0
                    )));
                }
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut Matrix)| {
            if !nodes[id.0].needs_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| {
                let (r, c) = nodes[id.0].value.shape();
                Matrix::zeros(r, c)
            });
            f(slot);
        };
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| g.accumulate_a_bt(vb, ga));
                acc(*b, &mut |gb| va.accumulate_at_b(g, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_scaled(g, -1.0));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*bias, &mut |gb| {
                    let row = gb.row_mut(0);
                    for r in 0..g.rows() {
                        for (x, y) in row.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::Affine(a, scale) => acc(*a, &mut |ga| ga.add_scaled(g, *scale)),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gv * (1.0 - y * y);
                }
            }),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                acc(*a, &mut |ga| {
                    for r in 0..g.rows() {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *x += y;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..g.rows() {
                        for (x, y) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }),
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, &mut |ga| ga.data_mut().iter_mut().for_each(|x| *x += s));
            }
            Op::SoftmaxRows(a) => acc(*a, &mut |ga| {
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((x, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *x += yv * (gv - dot);
                    }
                }
            }),
            Op::CrossEntropy { probs, targets } => {
                let s = g.item();
                let vp = self.value(*probs);
                acc(*probs, &mut |gp| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let v = gp.get(r, t) - s / vp.get(r, t);
                            gp.set(r, t, v);
                        }
                    }
                });
            }
            Op::Attention {
                query,
                keys,
                weights,
            } => {
                let q = self.value(*query);
                let (batch, width) = q.shape();
                // d score[b][s]
                let mut dscore = Matrix::zeros(batch, keys.len());
                for b in 0..batch {
                    let gb = g.row(b);
                    let mut mean = 0.0;
                    for (s, &k) in keys.iter().enumerate() {
                        let da: f64 = gb.iter().zip(self.value(k).row(b)).map(|(x, y)| x * y).sum();
                        dscore.set(b, s, da);
                        mean += weights.get(b, s) * da;
                    }
                    for s in 0..keys.len() {
                        let v = weights.get(b, s) * (dscore.get(b, s) - mean);
                        dscore.set(b, s, v);
                    }
                }
                acc(*query, &mut |gq| {
                    for b in 0..batch {
                        for (s, &k) in keys.iter().enumerate() {
                            let ds = dscore.get(b, s);
                            if ds != 0.0 {
                                for (x, kv) in gq.row_mut(b).iter_mut().zip(self.value(k).row(b)) {
                                    *x += ds * kv;
                                }
                            }
                        }
                    }
                });
                for (s, &k) in keys.iter().enumerate() {
                    acc(k, &mut |gk| {
                        for b in 0..batch {
                            let (w, ds) = (weights.get(b, s), dscore.get(b, s));
                            let row = gk.row_mut(b);
                            for c in 0..width {
                                row[c] += w * g.get(b, c) + ds * q.get(b, c);
                            }
                        }
                    });
                }
            }
            Op::Custom { input, local_grad } => {
                let s = g.item();
                acc(*input, &mut |gi| gi.add_scaled(local_grad, s));
            }
        }
    }
}
