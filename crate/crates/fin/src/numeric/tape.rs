//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! A tape records one forward computation (typically one mini-batch of the
//! model). `backward` walks the tape in reverse and returns a gradient per
//! node; parameter leaves are then flushed into the [`ParamStore`] gradient
//! slots.

use crate::error::{FinError, Result};
use crate::numeric::matrix::{softmax_masked, DenseMatrix};
use crate::numeric::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Rows(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    PadRows(NodeId),
    Softmax(NodeId),
    Silu(NodeId),
    AddN(Vec<NodeId>),
    NllTwoWay(NodeId, usize),
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // one tape node per parameter, so repeated uses share value and grad
    param_nodes: std::collections::HashMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant (non-differentiated) input.
    pub fn constant(&mut self, m: DenseMatrix) -> NodeId {
        self.push(m, Op::Const)
    }

    /// A differentiated leaf bound to parameter `idx` in the store.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let id = self.push(store.value(idx).clone(), Op::Param(idx));
        self.param_nodes.insert(idx, id);
        id
    }

    /// Gather rows of `src` by index (embedding lookup). Indices may repeat.
    pub fn rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let m = self.value(src);
        let mut out = DenseMatrix::zeros(indices.len(), m.cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= m.rows {
                return Err(FinError::Dimension(format!(
                    "row index {} out of {} rows",
                    i, m.rows
                )));
            }
            let cols = m.cols;
            out.data[r * cols..(r + 1) * cols].copy_from_slice(m.row(i));
        }
        Ok(self.push(out, Op::Rows(src, indices.to_vec())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = DenseMatrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = DenseMatrix::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Mean over rows: rows x d -> 1 x d.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows == 0 {
            return Err(FinError::Degenerate("mean over zero rows".into()));
        }
        let mut out = DenseMatrix::zeros(1, m.cols);
        for r in 0..m.rows {
            for c in 0..m.cols {
                out.data[c] += m.at(r, c);
            }
        }
        let n = m.rows as f64;
        for v in out.data.iter_mut() {
            *v /= n;
        }
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Zero-pad `a` with extra rows at the bottom up to `rows` total.
    pub fn pad_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows > rows {
            return Err(FinError::Dimension(format!(
                "pad_rows target {} below current {}",
                rows, m.rows
            )));
        }
        let mut out = DenseMatrix::zeros(rows, m.cols);
        out.data[..m.rows * m.cols].copy_from_slice(&m.data);
        Ok(self.push(out, Op::PadRows(a)))
    }

    /// Softmax over a 1 x n row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows != 1 || m.cols == 0 {
            return Err(FinError::Dimension("softmax expects a nonempty 1 x n row".into()));
        }
        let w = softmax_masked(&m.data, &vec![true; m.cols])?;
        let v = DenseMatrix::from_vec(1, m.cols, w)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// x * sigmoid(x), elementwise. Smooth, so finite differences behave.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let data = m.data.iter().map(|&x| x * sigmoid(x)).collect();
        let v = DenseMatrix {
            rows: m.rows,
            cols: m.cols,
            data,
        };
        self.push(v, Op::Silu(a))
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| FinError::Degenerate("add_n of zero nodes".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            out = out.add(self.value(p))?;
        }
        Ok(self.push(out, Op::AddN(parts.to_vec())))
    }

    /// Negative log-likelihood of `label` under a 2-way softmax of `logits`
    /// (1 x 2). Probabilities are clamped at 1e-12 before the log.
    pub fn nll_two_way(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let m = self.value(logits);
        if m.rows != 1 || m.cols != 2 {
            return Err(FinError::Dimension("nll_two_way expects 1 x 2 logits".into()));
        }
        if label > 1 {
            return Err(FinError::InputDomain(format!("label {} not binary", label)));
        }
        let p = softmax_masked(&m.data, &[true, true])?;
        let loss = -(p[label].max(1e-12)).ln();
        Ok(self.push(DenseMatrix::scalar(loss), Op::NllTwoWay(logits, label)))
    }

    /// Run reverse-mode accumulation from scalar node `root` (seeded with 1).
    pub fn backward(&self, root: NodeId) -> Result<Vec<DenseMatrix>> {
        let rm = &self.nodes[root.0].value;
        if rm.rows != 1 || rm.cols != 1 {
            return Err(FinError::Dimension("backward root must be scalar".into()));
        }
        let mut grads: Vec<DenseMatrix> = self
            .nodes
            .iter()
            .map(|n| DenseMatrix::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root.0].data[0] = 1.0;

        for i in (0..=root.0).rev() {
            if grads[i].data.iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Const | Op::Param(_) => {}
                Op::Rows(src, indices) => {
                    let cols = g.cols;
                    let dst = &mut grads[src.0];
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dst.data[idx * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let gb = self.nodes[a.0].value.transpose().matmul(&g)?;
                    grads[a.0] = grads[a.0].add(&ga)?;
                    grads[b.0] = grads[b.0].add(&gb)?;
                }
                Op::Transpose(a) => {
                    let ga = g.transpose();
                    grads[a.0] = grads[a.0].add(&ga)?;
                }
                Op::Add(a, b) => {
                    grads[a.0] = grads[a.0].add(&g)?;
                    grads[b.0] = grads[b.0].add(&g)?;
                }
                Op::Sub(a, b) => {
                    grads[a.0] = grads[a.0].add(&g)?;
                    grads[b.0] = grads[b.0].sub(&g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.elementwise_mul(&self.nodes[b.0].value)?;
                    let gb = g.elementwise_mul(&self.nodes[a.0].value)?;
                    grads[a.0] = grads[a.0].add(&ga)?;
                    grads[b.0] = grads[b.0].add(&gb)?;
                }
                Op::Scale(a, s) => {
                    grads[a.0] = grads[a.0].add(&g.scale(*s))?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols;
                        let dst = &mut grads[p.0];
                        for r in 0..g.rows {
                            for c in 0..pc {
                                dst.data[r * pc + c] += g.data[r * g.cols + off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.rows;
                        let cols = g.cols;
                        let dst = &mut grads[p.0];
                        dst.data
                            .iter_mut()
                            .zip(&g.data[off * cols..(off + pr) * cols])
                            .for_each(|(d, &s)| *d += s);
                        off += pr;
                    }
                }
                Op::MeanRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let inv = 1.0 / src.rows as f64;
                    let dst = &mut grads[a.0];
                    for r in 0..src.rows {
                        for c in 0..src.cols {
                            dst.data[r * src.cols + c] += g.data[c] * inv;
                        }
                    }
                }
                Op::PadRows(a) => {
                    let pr = self.nodes[a.0].value.rows;
                    let cols = g.cols;
                    let dst = &mut grads[a.0];
                    dst.data
                        .iter_mut()
                        .zip(&g.data[..pr * cols])
                        .for_each(|(d, &s)| *d += s);
                }
                Op::Softmax(a) => {
                    // dx = s * (g - <g, s>)
                    let s = &self.nodes[i].value;
                    let dot: f64 = g.data.iter().zip(&s.data).map(|(&x, &y)| x * y).sum();
                    let dst = &mut grads[a.0];
                    for c in 0..s.cols {
                        dst.data[c] += s.data[c] * (g.data[c] - dot);
                    }
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let dst = &mut grads[a.0];
                    for (k, (&xv, &gv)) in x.data.iter().zip(&g.data).enumerate() {
                        let s = sigmoid(xv);
                        dst.data[k] += gv * (s + xv * s * (1.0 - s));
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        grads[p.0] = grads[p.0].add(&g)?;
                    }
                }
                Op::NllTwoWay(logits, label) => {
                    let lm = &self.nodes[logits.0].value;
                    let p = softmax_masked(&lm.data, &[true, true])?;
                    let up = g.data[0];
                    let dst = &mut grads[logits.0];
                    for c in 0..2 {
                        let onehot = if c == *label { 1.0 } else { 0.0 };
                        dst.data[c] += up * (p[c] - onehot);
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Backward from `root` and add leaf gradients into the store.
    pub fn backward_into(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let Op::Param(idx) = node.op {
                store.grad_mut(idx).data
                    .iter_mut()
                    .zip(&grad.data)
                    .for_each(|(d, &s)| *d += s);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
