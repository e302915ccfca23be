//! Reverse-mode differentiation over a linear tape.
//!
//! Every node is appended after its operands, so a single reverse sweep over
//! the node list visits each node after all of its consumers. Only leaves
//! created with [`Tape::param`] receive gradients; nodes that do not depend on
//! a parameter are skipped during the sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{EmbeditError, Result};
use crate::ops::{self, LayerNormSaved};
use crate::tensor::{mean_squared_diff, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SumAll(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: LayerNormSaved,
    },
    Softmax(usize),
    Gelu(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    MseConst {
        x: usize,
        target: Tensor,
        rows: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the differentiable leaves, keyed by their node ids.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(EmbeditError::Usage(format!(
                "node {} does not belong to this tape",
                id.index
            )));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A constant leaf; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(id)?].value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let value = ops::transpose(&self.nodes[ia].value)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Transpose(ia), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(EmbeditError::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::from_raw(ta.shape().to_vec(), data)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, value) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, value) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, value) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Mul(ia, ib), rg))
    }

    /// Adds a `[n]` row vector to every final-axis slice of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = ta.last_dim();
        if tb.shape() != [n] {
            return Err(EmbeditError::dim("add_row", ta.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::AddRow(ia, ib), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let value = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|x| c * x).collect());
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Scale(ia, c), rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.data().iter().sum());
        let rg = self.rg(ia);
        Ok(self.push(value, Op::SumAll(ia), rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (value, saved) = ops::layer_norm_raw(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                saved,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let value = ops::softmax_rows(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Softmax(ix), rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let value = ops::gelu(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Gelu(ix), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let [m, n] = *t.shape() else {
            return Err(EmbeditError::dim("slice_cols", t.shape(), &[0, 0]));
        };
        if len == 0 || start + len > n {
            return Err(EmbeditError::dim("slice_cols", t.shape(), &[start, len]));
        }
        let data = (0..m)
            .flat_map(|r| t.row(r)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_raw(vec![m, len], data);
        let rg = self.rg(ix);
        Ok(self.push(value, Op::SliceCols { x: ix, start }, rg))
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .ok_or_else(|| EmbeditError::Usage("concat_cols of nothing".into()))?;
        let m = self.nodes[*first].value.shape()[0];
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != 2 || s[0] != m {
                return Err(EmbeditError::dim("concat_cols", self.nodes[*first].value.shape(), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_raw(vec![m, total], data), Op::ConcatCols(idx), rg))
    }

    /// Stacks `[d]` vectors into a `[rows × d]` matrix. A node may appear
    /// more than once; its gradient accumulates over every occurrence.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let idx = rows.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .ok_or_else(|| EmbeditError::Usage("stack_rows of nothing".into()))?;
        let d = self.nodes[*first].value.numel();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.shape() != [d] {
                return Err(EmbeditError::dim("stack_rows", &[d], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_raw(vec![idx.len(), d], data), Op::StackRows(idx), rg))
    }

    /// Mean squared difference between the first `rows` rows of `x` and of
    /// a constant `target` of the same shape.
    pub fn mse_const(&mut self, x: NodeId, target: &Tensor, rows: usize) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        if t.shape() != target.shape() {
            return Err(EmbeditError::dim("mse", t.shape(), target.shape()));
        }
        if rows == 0 || rows > t.rows() {
            return Err(EmbeditError::Range(format!(
                "mse over {rows} rows of a {}-row tensor",
                t.rows()
            )));
        }
        let n = rows * t.last_dim();
        let value = Tensor::scalar(mean_squared_diff(&t.data()[..n], &target.data()[..n]));
        let rg = self.rg(ix);
        Ok(self.push(
            value,
            Op::MseConst {
                x: ix,
                target: target.clone(),
                rows,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(EmbeditError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        adj[il] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    grads.grads.insert(
                        NodeId {
                            tape: self.id,
                            index: i,
                        },
                        Tensor::from_raw(shape.to_vec(), g),
                    );
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.rg(*a) {
                        let bt = ops::transpose_raw(tb.data(), k, n);
                        accumulate(&mut adj, *a, ops::matmul_raw(&g, &bt, m, n, k));
                    }
                    if self.rg(*b) {
                        let at = ops::transpose_raw(ta.data(), m, k);
                        accumulate(&mut adj, *b, ops::matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (shape[0], shape[1]);
                    accumulate(&mut adj, *a, ops::transpose_raw(&g, m, n));
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        let n = node.value.last_dim();
                        let mut col = vec![0.0; n];
                        for r in g.chunks(n) {
                            for (c, v) in col.iter_mut().zip(r) {
                                *c += v;
                            }
                        }
                        accumulate(&mut adj, *b, col);
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| c * v).collect());
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.numel();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let d = node.value.last_dim();
                    let gam = self.nodes[*gamma].value.data();
                    if self.rg(*x) {
                        let mut dx = vec![0.0; g.len()];
                        for (r, &rs) in saved.rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xh = &saved.xhat[r * d..(r + 1) * d];
                            let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dxhat_xhat =
                                dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                    if self.rg(*gamma) {
                        let mut dg = vec![0.0; d];
                        for (gr, xh) in g.chunks(d).zip(saved.xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * xh[j];
                            }
                        }
                        accumulate(&mut adj, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        let mut db = vec![0.0; d];
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                db[j] += gr[j];
                            }
                        }
                        accumulate(&mut adj, *beta, db);
                    }
                }
                Op::Softmax(x) => {
                    let d = node.value.last_dim();
                    let y = node.value.data();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let xs = self.nodes[*x].value.data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(gv, &xv)| gv * ops::gelu_derivative(xv))
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let src = &self.nodes[*x].value;
                    let n = src.last_dim();
                    let len = node.value.last_dim();
                    let mut dx = vec![0.0; src.numel()];
                    for (r, gr) in g.chunks(len).enumerate() {
                        dx[r * n + start..r * n + start + len].copy_from_slice(gr);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.last_dim();
                        if self.rg(p) {
                            let dx = g
                                .chunks(total)
                                .flat_map(|r| r[offset..offset + w].iter().copied())
                                .collect();
                            accumulate(&mut adj, p, dx);
                        }
                        offset += w;
                    }
                }
                Op::StackRows(rows) => {
                    let d = node.value.last_dim();
                    for (r, &p) in rows.iter().enumerate() {
                        if self.rg(p) {
                            accumulate(&mut adj, p, g[r * d..(r + 1) * d].to_vec());
                        }
                    }
                }
                Op::MseConst { x, target, rows } => {
                    let xv = self.nodes[*x].value.data();
                    let n = rows * self.nodes[*x].value.last_dim();
                    let scale = g[0] * 2.0 / n as f64;
                    let mut dx = vec![0.0; xv.len()];
                    for j in 0..n {
                        dx[j] = scale * (xv[j] - target.data()[j]);
                    }
                    accumulate(&mut adj, *x, dx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut adj[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![0.1, -4., 2., 7., 0., 1.]).unwrap());
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_gradient_matches_formula() {
        let xs = vec![0.5, -1.25, 3.0, 2.0];
        let ys = vec![1.0, 0.0, -2.0, 2.5];
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, xs.clone()).unwrap());
        let target = Tensor::matrix(2, 2, ys.clone()).unwrap();
        let loss = tape.mse_const(x, &target, 2).unwrap();
        let g = tape.backward(loss).unwrap();
        for (i, gv) in g.get(x).unwrap().data().iter().enumerate() {
            assert!((gv - 2.0 * (xs[i] - ys[i]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]).unwrap());
        let c = tape.leaf(Tensor::vector(vec![3., 4.]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn foreign_or_non_scalar_loss_is_a_usage_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.param(Tensor::scalar(1.0));
        let _ = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.backward(xa), Err(EmbeditError::Usage(_))));
        let v = a.param(Tensor::vector(vec![1., 2.]).unwrap());
        assert!(matches!(a.backward(v), Err(EmbeditError::Usage(_))));
    }

    #[test]
    fn repeated_row_accumulates() {
        let mut tape = Tape::new();
        let r = tape.param(Tensor::vector(vec![1., 2.]).unwrap());
        let m = tape.stack_rows(&[r, r, r]).unwrap();
        let s = tape.sum_all(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[3., 3.]);
    }
}
