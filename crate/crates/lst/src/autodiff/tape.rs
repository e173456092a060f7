//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Values are computed eagerly as the expression graph is built. A backward
//! pass appends vector-Jacobian ops to the *same* tape, so gradients are
//! ordinary differentiable nodes: differentiating a loss that depends on an
//! earlier gradient (as in unrolled inner-loop updates) picks up exact
//! second-order terms. A [`Tape::stop_gradient`] node cuts that flow where a
//! first-order approximation is wanted.

use crate::autodiff::array::Array;
use crate::error::{Error, Result};

const CLAMP_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGradient { x: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    Log { x: NodeId },
    Recip { x: NodeId },
    Sum { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize, end: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::StopGradient { x }
            | Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::SoftmaxRows { x }
            | Op::Log { x }
            | Op::Recip { x }
            | Op::Sum { x }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape { x, .. } => [Some(x), None],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatCols { a, b } => [Some(a), Some(b)],
            Op::CrossEntropyRows { logits, .. } => [Some(logits), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Expression tape. Nodes are appended in topological order and never mutated,
/// so node values stay valid for the life of the tape.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dim(op: &'static str, a: [usize; 2], b: [usize; 2], axis: usize) -> Result<usize> {
    let (x, y) = (a[axis], b[axis]);
    if x == y {
        Ok(x)
    } else if x == 1 {
        Ok(y)
    } else if y == 1 {
        Ok(x)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    Ok([
        broadcast_dim(op, a, b, 0)?,
        broadcast_dim(op, a, b, 1)?,
    ])
}

fn elementwise(a: &Array, b: &Array, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Array {
    let [r, c] = out;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if a.rows() == 1 { 0 } else { i };
        let bi = if b.rows() == 1 { 0 } else { i };
        for j in 0..c {
            let aj = if a.cols() == 1 { 0 } else { j };
            let bj = if b.cols() == 1 { 0 } else { j };
            data.push(f(a.at(ai, aj), b.at(bi, bj)));
        }
    }
    // Finiteness is validated when the node is pushed, so overflow surfaces
    // as a NonFinite error naming the op rather than a panic here.
    Array::from_vec_unchecked(r, c, data)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Values are immutable once appended.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn push(&mut self, op: &'static str, value: Array, kind: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: kind });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Source node holding a constant or parameter value.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Identity in the forward pass; blocks all gradient flow in backward
    /// passes, including through later differentiation of gradient nodes.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient { x },
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape_vec(),
                rhs: vb.shape_vec(),
            });
        }
        let (m, p, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..p {
                let aik = va.at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = vb.row_slice(k);
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let value = Array::from_vec_unchecked(m, n, out);
        self.push("matmul", value, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transposed();
        self.push("transpose", value, Op::Transpose { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let value = elementwise(self.value(a), self.value(b), shape, |x, y| x + y);
        self.push("add", value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shape("sub", self.value(a).shape(), self.value(b).shape())?;
        let value = elementwise(self.value(a), self.value(b), shape, |x, y| x - y);
        self.push("sub", value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let value = elementwise(self.value(a), self.value(b), shape, |x, y| x * y);
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let value = Array::from_vec_unchecked(v.rows(), v.cols(), data);
        self.push("scale", value, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(0.0)).collect();
        let value = Array::from_vec_unchecked(v.rows(), v.cols(), data);
        self.push("relu", value, Op::Relu { x })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = v.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let value = Array::from_vec_unchecked(m, n, data);
        self.push("softmax-rows", value, Op::SoftmaxRows { x })
    }

    /// Natural log with inputs clamped below at 1e-12.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(CLAMP_EPS).ln()).collect();
        let value = Array::from_vec_unchecked(v.rows(), v.cols(), data);
        self.push("log", value, Op::Log { x })
    }

    /// Elementwise reciprocal; magnitudes are clamped below at 1e-12.
    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&e| {
                let c = if e.abs() < CLAMP_EPS {
                    CLAMP_EPS * if e.is_sign_negative() { -1.0 } else { 1.0 }
                } else {
                    e
                };
                1.0 / c
            })
            .collect();
        let value = Array::from_vec_unchecked(v.rows(), v.cols(), data);
        self.push("recip", value, Op::Recip { x })
    }

    /// Sum of all entries, as a [1, 1] scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum", Array::scalar(total), Op::Sum { x })
    }

    /// Mean of all entries (sum scaled by 1/len).
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat-cols",
                lhs: va.shape_vec(),
                rhs: vb.shape_vec(),
            });
        }
        let (m, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        let value = Array::from_vec_unchecked(m, ca + cb, data);
        self.push("concat-cols", value, Op::ConcatCols { a, b })
    }

    /// Columns [start, end) of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start >= end || end > v.cols() {
            return Err(Error::Contract(format!(
                "slice-cols [{start}, {end}) out of range for {} columns",
                v.cols()
            )));
        }
        let m = v.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&v.row_slice(i)[start..end]);
        }
        let value = Array::from_vec_unchecked(m, end - start, data);
        self.push("slice-cols", value, Op::SliceCols { x, start, end })
    }

    /// Rows picked by index, with repetition allowed.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if indices.is_empty() {
            return Err(Error::Contract("gather-rows needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Contract(format!(
                "gather-rows index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let n = v.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(v.row_slice(i));
        }
        let value = Array::from_vec_unchecked(indices.len(), n, data);
        self.push(
            "gather-rows",
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x);
        if rows * cols != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape_vec(),
                rhs: vec![rows, cols],
            });
        }
        let value = Array::from_vec_unchecked(rows, cols, v.data().to_vec());
        self.push("reshape", value, Op::Reshape { x })
    }

    /// Per-row cross-entropy `logsumexp(z) - z[target]`, shape [m, 1].
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if targets.len() != v.rows() {
            return Err(Error::Contract(format!(
                "cross-entropy got {} targets for {} rows",
                targets.len(),
                v.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v.cols()) {
            return Err(Error::Contract(format!(
                "cross-entropy target {bad} out of range for {} classes",
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows());
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
            data.push(lse - row[t]);
        }
        let value = Array::from_vec_unchecked(v.rows(), 1, data);
        self.push(
            "cross-entropy-rows",
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Row sums as an [m, 1] column (matmul against a ones column).
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).cols();
        let ones = self.leaf(Array::ones(n, 1));
        self.matmul(x, ones)
    }

    /// Column sums as a [1, n] row (matmul against a ones row).
    pub fn col_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.value(x).rows();
        let ones = self.leaf(Array::ones(1, m));
        self.matmul(ones, x)
    }

    /// Reduce `g` down to `target` shape by summing broadcast axes.
    fn reduce_to(&mut self, g: NodeId, target: [usize; 2]) -> Result<NodeId> {
        let mut cur = g;
        let shape = self.value(cur).shape();
        if shape == target {
            return Ok(cur);
        }
        if target == [1, 1] {
            return self.sum(cur);
        }
        if target[0] == 1 && self.value(cur).rows() > 1 {
            cur = self.col_sum(cur)?;
        }
        if target[1] == 1 && self.value(cur).cols() > 1 {
            cur = self.row_sum(cur)?;
        }
        if self.value(cur).shape() != target {
            return Err(Error::ShapeMismatch {
                op: "reduce-to",
                lhs: self.value(cur).shape_vec(),
                rhs: target.to_vec(),
            });
        }
        Ok(cur)
    }

    /// Append VJP nodes for `d loss / d wrt[i]` and return their ids, in the
    /// order of `wrt`. The loss must be scalar. Targets with no gradient path
    /// get a zero-valued leaf of matching shape. Because the returned ids are
    /// ordinary nodes, a later `grad_nodes` call whose loss depends on them
    /// differentiates *through* this gradient computation.
    pub fn grad_nodes(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "grad target must be scalar, got shape {:?}",
                self.value(loss).shape_vec()
            )));
        }
        let horizon = loss.0 + 1;

        // Forward reachability from the wrt set; stop-gradient nodes never
        // propagate it, which is exactly what truncates first-order variants.
        let mut reaches = vec![false; horizon];
        for w in wrt {
            if w.0 < horizon {
                reaches[w.0] = true;
            }
        }
        for i in 0..horizon {
            if reaches[i] || matches!(self.nodes[i].op, Op::StopGradient { .. }) {
                continue;
            }
            reaches[i] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|j| reaches[j.0]);
        }

        let mut grad: Vec<Option<NodeId>> = vec![None; horizon];
        if reaches[loss.0] {
            grad[loss.0] = Some(self.leaf(Array::scalar(1.0)));
        }

        for i in (0..horizon).rev() {
            let Some(g) = grad[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(NodeId(i), op, g, &reaches, &mut grad)?;
        }

        wrt.iter()
            .map(|w| {
                Ok(match grad.get(w.0).copied().flatten() {
                    Some(g) => g,
                    None => {
                        let [r, c] = self.value(*w).shape();
                        self.leaf(Array::zeros(r, c))
                    }
                })
            })
            .collect()
    }

    /// Convenience wrapper around [`Tape::grad_nodes`] returning cloned values.
    pub fn grad_arrays(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Array>> {
        let ids = self.grad_nodes(loss, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    fn accumulate(
        &mut self,
        grad: &mut [Option<NodeId>],
        reaches: &[bool],
        target: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        if target.0 >= reaches.len() || !reaches[target.0] {
            return Ok(());
        }
        grad[target.0] = Some(match grad[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    fn backward_op(
        &mut self,
        out: NodeId,
        op: Op,
        g: NodeId,
        reaches: &[bool],
        grad: &mut [Option<NodeId>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::StopGradient { .. } => {}
            Op::MatMul { a, b } => {
                if reaches[a.0] {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(grad, reaches, a, da)?;
                }
                if reaches[b.0] {
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(grad, reaches, b, db)?;
                }
            }
            Op::Transpose { x } => {
                let dx = self.transpose(g)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Add { a, b } => {
                if reaches[a.0] {
                    let da = self.reduce_to(g, self.value(a).shape())?;
                    self.accumulate(grad, reaches, a, da)?;
                }
                if reaches[b.0] {
                    let db = self.reduce_to(g, self.value(b).shape())?;
                    self.accumulate(grad, reaches, b, db)?;
                }
            }
            Op::Sub { a, b } => {
                if reaches[a.0] {
                    let da = self.reduce_to(g, self.value(a).shape())?;
                    self.accumulate(grad, reaches, a, da)?;
                }
                if reaches[b.0] {
                    let neg = self.scale(g, -1.0)?;
                    let db = self.reduce_to(neg, self.value(b).shape())?;
                    self.accumulate(grad, reaches, b, db)?;
                }
            }
            Op::Mul { a, b } => {
                if reaches[a.0] {
                    let full = self.mul(g, b)?;
                    let da = self.reduce_to(full, self.value(a).shape())?;
                    self.accumulate(grad, reaches, a, da)?;
                }
                if reaches[b.0] {
                    let full = self.mul(g, a)?;
                    let db = self.reduce_to(full, self.value(b).shape())?;
                    self.accumulate(grad, reaches, b, db)?;
                }
            }
            Op::Scale { x, factor } => {
                let dx = self.scale(g, factor)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Relu { x } => {
                // The 0/1 activation mask is a constant of the forward values;
                // the subgradient at exactly zero is taken as zero.
                let v = self.value(x);
                let mask: Vec<f64> = v
                    .data()
                    .iter()
                    .map(|&e| if e > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = Array::new(v.rows(), v.cols(), mask)?;
                let mask = self.leaf(mask);
                let dx = self.mul(g, mask)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::SoftmaxRows { x } => {
                // dz = y * (g - rowsum(g * y)) where y is this node's output.
                let gy = self.mul(g, out)?;
                let s = self.row_sum(gy)?;
                let centered = self.sub(g, s)?;
                let dx = self.mul(out, centered)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Log { x } => {
                let r = self.recip(x)?;
                let dx = self.mul(g, r)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Recip { x } => {
                let yy = self.mul(out, out)?;
                let gyy = self.mul(g, yy)?;
                let dx = self.scale(gyy, -1.0)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Sum { x } => {
                let [r, c] = self.value(x).shape();
                let ones = self.leaf(Array::ones(r, c));
                let dx = self.mul(ones, g)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                if reaches[a.0] {
                    let da = self.slice_cols(g, 0, ca)?;
                    self.accumulate(grad, reaches, a, da)?;
                }
                if reaches[b.0] {
                    let db = self.slice_cols(g, ca, ca + cb)?;
                    self.accumulate(grad, reaches, b, db)?;
                }
            }
            Op::SliceCols { x, start, end } => {
                let [m, c] = self.value(x).shape();
                let mut dx = g;
                if start > 0 {
                    let left = self.leaf(Array::zeros(m, start));
                    dx = self.concat_cols(left, dx)?;
                }
                if end < c {
                    let right = self.leaf(Array::zeros(m, c - end));
                    dx = self.concat_cols(dx, right)?;
                }
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::GatherRows { x, indices } => {
                // Scatter-add expressed as a matmul with the transposed
                // selection matrix, keeping the VJP differentiable.
                let m = self.value(x).rows();
                let k = indices.len();
                let mut scatter = Array::zeros(m, k);
                for (i, &src) in indices.iter().enumerate() {
                    scatter.set(src, i, 1.0);
                }
                let scatter = self.leaf(scatter);
                let dx = self.matmul(scatter, g)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::Reshape { x, .. } => {
                let [r, c] = self.value(x).shape();
                let dx = self.reshape(g, r, c)?;
                self.accumulate(grad, reaches, x, dx)?;
            }
            Op::CrossEntropyRows { logits, targets } => {
                // dz = (softmax(z) - onehot) * g, with g an [m, 1] column
                // broadcast across classes.
                let sm = self.softmax_rows(logits)?;
                let oh = self.leaf(Array::one_hot(&targets, self.value(logits).cols())?);
                let diff = self.sub(sm, oh)?;
                let dx = self.mul(diff, g)?;
                self.accumulate(grad, reaches, logits, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(values: &[Array]) -> (Tape, Vec<NodeId>) {
        let mut t = Tape::new();
        let ids = values.iter().map(|v| t.leaf(v.clone())).collect();
        (t, ids)
    }

    #[test]
    fn matmul_small_example() {
        let a = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Array::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let (mut t, ids) = tape_with(&[a, b]);
        let c = t.matmul(ids[0], ids[1]).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        assert_eq!(t.value(c).shape(), [2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let (mut t, ids) = tape_with(&[Array::ones(2, 3), Array::ones(2, 3)]);
        let err = t.matmul(ids[0], ids[1]).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_uniform_and_spread() {
        let (mut t, ids) = tape_with(&[Array::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap()]);
        let s = t.softmax_rows(ids[0]).unwrap();
        let v = t.value(s);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(0, 1) - 0.5).abs() < 1e-15);
        // softmax([3, 0]) = [e^3, 1] / (e^3 + 1)
        let e3 = 3f64.exp();
        assert!((v.at(1, 0) - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((v.at(1, 0) - 0.9525741268224334).abs() < 1e-12);
        assert!((v.row_slice(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let (mut t, ids) = tape_with(&[Array::row(&[1.0, 2.0, 3.0])]);
        let sq = t.mul(ids[0], ids[0]).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.grad_arrays(loss, &[ids[0]]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_order_grad_of_grad() {
        // loss1 = sum(x*x), g = 2x; loss2 = sum(g*g) = 4*sum(x^2); d loss2/dx = 8x.
        let (mut t, ids) = tape_with(&[Array::row(&[1.0, 2.0, 3.0])]);
        let sq = t.mul(ids[0], ids[0]).unwrap();
        let loss1 = t.sum(sq).unwrap();
        let g = t.grad_nodes(loss1, &[ids[0]]).unwrap()[0];
        let gg = t.mul(g, g).unwrap();
        let loss2 = t.sum(gg).unwrap();
        let g2 = t.grad_arrays(loss2, &[ids[0]]).unwrap();
        assert_eq!(g2[0].data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn unrolled_step_meta_gradient_matches_analytic() {
        // Inner: L_in = (th - a)^2, th' = th - alpha * dL_in/dth.
        // Outer: L_out = (th' - b)^2, dL_out/dth = 2(th' - b)(1 - 2 alpha).
        let alpha = 0.1;
        let (mut t, ids) = tape_with(&[
            Array::scalar(1.5),
            Array::scalar(0.5),
            Array::scalar(2.0),
        ]);
        let (th, a, b) = (ids[0], ids[1], ids[2]);
        let d = t.sub(th, a).unwrap();
        let l_in = t.mul(d, d).unwrap();
        let g = t.grad_nodes(l_in, &[th]).unwrap()[0];
        assert_eq!(t.value(g).scalar_value(), 2.0);
        let step = t.scale(g, alpha).unwrap();
        let th_p = t.sub(th, step).unwrap();
        assert!((t.value(th_p).scalar_value() - 1.3).abs() < 1e-15);
        let d2 = t.sub(th_p, b).unwrap();
        let l_out = t.mul(d2, d2).unwrap();
        let meta = t.grad_arrays(l_out, &[th]).unwrap();
        // 2 * (1.3 - 2.0) * (1 - 0.2) = -1.12
        assert!((meta[0].scalar_value() - (-1.12)).abs() < 1e-12);
    }

    #[test]
    fn first_order_step_drops_update_jacobian() {
        let alpha = 0.1;
        let (mut t, ids) = tape_with(&[
            Array::scalar(1.5),
            Array::scalar(0.5),
            Array::scalar(2.0),
        ]);
        let (th, a, b) = (ids[0], ids[1], ids[2]);
        let d = t.sub(th, a).unwrap();
        let l_in = t.mul(d, d).unwrap();
        let g = t.grad_nodes(l_in, &[th]).unwrap()[0];
        let g = t.stop_gradient(g);
        let step = t.scale(g, alpha).unwrap();
        let th_p = t.sub(th, step).unwrap();
        let d2 = t.sub(th_p, b).unwrap();
        let l_out = t.mul(d2, d2).unwrap();
        let meta = t.grad_arrays(l_out, &[th]).unwrap();
        // Identity path only: 2 * (1.3 - 2.0) = -1.4
        assert!((meta[0].scalar_value() - (-1.4)).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_blocks_flow_entirely() {
        let (mut t, ids) = tape_with(&[Array::row(&[1.0, -2.0])]);
        let s = t.stop_gradient(ids[0]);
        let sq = t.mul(s, s).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.grad_arrays(loss, &[ids[0]]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_rows() {
        // Equal logits over 4 classes: loss = ln(4), grad = softmax - onehot.
        let (mut t, ids) = tape_with(&[Array::from_rows(&[vec![1.0; 4], vec![1.0; 4]]).unwrap()]);
        let ce = t.cross_entropy_rows(ids[0], &[0, 2]).unwrap();
        let v = t.value(ce);
        assert!((v.at(0, 0) - 4f64.ln()).abs() < 1e-12);
        assert!((v.at(1, 0) - 4f64.ln()).abs() < 1e-12);
        let loss = t.sum(ce).unwrap();
        let g = t.grad_arrays(loss, &[ids[0]]).unwrap();
        assert!((g[0].at(0, 0) - (0.25 - 1.0)).abs() < 1e-12);
        assert!((g[0].at(0, 1) - 0.25).abs() < 1e-12);
        assert!((g[0].at(1, 2) - (0.25 - 1.0)).abs() < 1e-12);
        // Each row of the CE gradient sums to zero.
        for r in 0..2 {
            let s: f64 = g[0].row_slice(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // y = x + rowvec, loss = sum(y): d/d rowvec = column counts.
        let (mut t, ids) = tape_with(&[Array::ones(3, 2), Array::row(&[10.0, 20.0])]);
        let y = t.add(ids[0], ids[1]).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.grad_arrays(loss, &[ids[0], ids[1]]).unwrap();
        assert_eq!(g[0].data(), &[1.0; 6]);
        assert_eq!(g[1].shape(), [1, 2]);
        assert_eq!(g[1].data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let (mut t, ids) = tape_with(&[Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()]);
        let gathered = t.gather_rows(ids[0], &[0, 0, 1]).unwrap();
        assert_eq!(t.value(gathered).rows(), 3);
        let loss = t.sum(gathered).unwrap();
        let g = t.grad_arrays(loss, &[ids[0]]).unwrap();
        // Row 0 appears twice, so it accumulates gradient 2 per entry.
        assert_eq!(g[0].data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip_gradients() {
        let (mut t, ids) = tape_with(&[Array::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()]);
        let left = t.slice_cols(ids[0], 0, 1).unwrap();
        let right = t.slice_cols(ids[0], 1, 3).unwrap();
        let back = t.concat_cols(left, right).unwrap();
        assert_eq!(t.value(back).data(), &[1.0, 2.0, 3.0]);
        let w = t.leaf(Array::row(&[1.0, 10.0, 100.0]));
        let weighted = t.mul(back, w).unwrap();
        let loss = t.sum(weighted).unwrap();
        let g = t.grad_arrays(loss, &[ids[0]]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 10.0, 100.0]);
    }

    #[test]
    fn unused_target_gets_zero_gradient() {
        let (mut t, ids) = tape_with(&[Array::scalar(2.0), Array::scalar(5.0)]);
        let loss = t.mul(ids[0], ids[0]).unwrap();
        let g = t.grad_arrays(loss, &[ids[1]]).unwrap();
        assert_eq!(g[0].scalar_value(), 0.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let (mut t, ids) = tape_with(&[Array::scalar(1e200)]);
        let doubled = t.add(ids[0], ids[0]).unwrap();
        let err = t.mul(doubled, doubled).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn mean_matches_manual() {
        let (mut t, ids) = tape_with(&[Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()]);
        let m = t.mean(ids[0]).unwrap();
        assert!((t.value_scalar(m) - 2.5).abs() < 1e-15);
        let g = t.grad_arrays(m, &[ids[0]]).unwrap();
        assert_eq!(g[0].data(), &[0.25; 4]);
    }
}
