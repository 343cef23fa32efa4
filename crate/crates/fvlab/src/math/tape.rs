// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation on a linear tape.
//!
//! Forward values are computed eagerly through the shared kernels as nodes are
//! appended, so a tape built without ever calling [`Tape::backward`] doubles
//! as the inference path; both paths therefore produce identical bits.
//! Backward walks the tape in reverse insertion order (a valid topological
//! order by construction) and accumulates gradients in fixed index order.

use crate::error::{FvError, Result};
use crate::math::kernels;
use crate::math::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Which rows of a `[rows, cols]` tensor an edit touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSel {
    All,
    Last,
    One(usize),
}

impl RowSel {
    fn contains(&self, row: usize, rows: usize) -> bool {
        match self {
            RowSel::All => true,
            RowSel::Last => row + 1 == rows,
            RowSel::One(r) => row == *r,
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// `[s,n] + [n]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `a @ b^T` with `b: [n,k]`.
    MatMulTB(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SoftmaxRows(NodeId),
    CausalSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<(f64, f64)>,
    },
    Gelu(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<u32>,
    },
    PickRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// Sum over rows of cross-entropy against `targets`; value is rank-0.
    CeSum {
        logits: NodeId,
        targets: Vec<u32>,
        probs: Tensor,
    },
    SumAll(NodeId),
    /// `x` with `scale * shift` added to the selected rows.
    AddAtRows {
        x: NodeId,
        shift: Tensor,
        rows: RowSel,
        scale: f64,
    },
    /// `x` with one row replaced by a constant vector.
    ReplaceRow {
        x: NodeId,
        row: usize,
    },
    /// Every row projected onto the complement of a unit direction.
    ProjectOutRows {
        x: NodeId,
        unit: Tensor,
    },
}

struct Node {
    value: Tensor,
    shadow_f64: Option<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node that must have one.
    pub fn expect(&self, id: NodeId) -> Result<&Tensor> {
        self.get(id)
            .ok_or_else(|| FvError::invalid(format!("no gradient recorded for node {}", id.0)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// f64 shadow of a scalar node when the forward op kept one (reductions);
    /// falls back to the rounded f32 value.
    pub fn scalar_f64(&self, id: NodeId) -> Result<f64> {
        let node = &self.nodes[id.0];
        if let Some(s) = node.shadow_f64 {
            return Ok(s);
        }
        Ok(node.value.item()? as f64)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs_grad = t.requires_grad();
        self.push(t, None, needs_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, shadow: Option<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            shadow_f64: shadow,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(FvError::shape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| (x as f64 + y as f64) as f32)
            .collect();
        let value = Tensor::from_kernel(ta.shape().to_vec(), data, "add")?;
        Ok(self.push(value, None, self.wants_grad(&[a, b]), Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, c) = tx.dims2()?;
        if tr.shape() != [c] {
            return Err(FvError::shape(format!(
                "add_row {:?} vs {:?}",
                tx.shape(),
                tr.shape()
            )));
        }
        let mut data = Vec::with_capacity(tx.len());
        for r in tx.data().chunks_exact(c) {
            for (j, &v) in r.iter().enumerate() {
                data.push((v as f64 + tr.data()[j] as f64) as f32);
            }
        }
        let value = Tensor::from_kernel(tx.shape().to_vec(), data, "add_row")?;
        Ok(self.push(value, None, self.wants_grad(&[x, row]), Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(FvError::shape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| (x as f64 * y as f64) as f32)
            .collect();
        let value = Tensor::from_kernel(ta.shape().to_vec(), data, "mul")?;
        Ok(self.push(value, None, self.wants_grad(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(FvError::NonFinite {
                op: "scale factor",
                index: 0,
            });
        }
        let tx = self.value(x);
        let data: Vec<f32> = tx.data().iter().map(|&v| (v as f64 * c) as f32).collect();
        let value = Tensor::from_kernel(tx.shape().to_vec(), data, "scale")?;
        let shadow = self.nodes[x.0].shadow_f64.map(|s| s * c);
        Ok(self.push(value, shadow, self.wants_grad(&[x]), Op::Scale(x, c)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(FvError::shape(format!("matmul [{m},{k}] @ [{k2},{n}]")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_kernel(vec![m, n], data, "matmul")?;
        Ok(self.push(value, None, self.wants_grad(&[a, b]), Op::MatMul(a, b)))
    }

    /// `a [m,k] @ b^T` with `b: [n,k]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(FvError::shape(format!("matmul_tb [{m},{k}] @ [{n},{k2}]^T")));
        }
        let data = kernels::matmul_tb(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_kernel(vec![m, n], data, "matmul_tb")?;
        Ok(self.push(value, None, self.wants_grad(&[a, b]), Op::MatMulTB(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(FvError::shape(format!("slice_cols {start}+{len} > {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let value = Tensor::from_kernel(vec![r, len], data, "slice_cols")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x]),
            Op::SliceCols { x, start, len },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return Err(FvError::shape(format!("slice_rows {start}+{len} > {r}")));
        }
        let src = self.value(x).data();
        let data = src[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_kernel(vec![len, c], data, "slice_rows")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x]),
            Op::SliceRows { x, start, len },
        ))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            kernels::softmax_row(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_kernel(vec![r, c], data, "softmax_rows")?;
        Ok(self.push(value, None, self.wants_grad(&[x]), Op::SoftmaxRows(x)))
    }

    /// Causal-masked softmax of square attention scores.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(FvError::shape(format!("causal_softmax on [{r},{c}]")));
        }
        let data = kernels::causal_softmax(self.value(x).data(), r);
        let value = Tensor::from_kernel(vec![r, c], data, "causal_softmax")?;
        Ok(self.push(value, None, self.wants_grad(&[x]), Op::CausalSoftmax(x)))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(FvError::shape("layer_norm affine params".into()));
        }
        let (data, stats) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            r,
            c,
            eps,
        );
        let value = Tensor::from_kernel(vec![r, c], data, "layer_norm")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x, gamma, beta]),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data: Vec<f32> = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::from_kernel(tx.shape().to_vec(), data, "gelu")?;
        Ok(self.push(value, None, self.wants_grad(&[x]), Op::Gelu(x)))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (r, c) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(FvError::invalid("gather with empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= r) {
            return Err(FvError::Token(format!("row id {bad} >= table rows {r}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&src[i as usize * c..(i as usize + 1) * c]);
        }
        let value = Tensor::from_kernel(vec![ids.len(), c], data, "gather")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[table]),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn pick_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(FvError::invalid("pick_rows with empty row list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(FvError::shape(format!("picked row {bad} >= {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_kernel(vec![rows.len(), c], data, "pick_rows")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x]),
            Op::PickRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Summed cross-entropy over rows; rank-0 output with f64 shadow.
    pub fn ce_sum(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(FvError::shape(format!(
                "ce_sum {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(FvError::Token(format!("target {t} >= vocab {c}")));
        }
        let (total, probs) = kernels::cross_entropy_rows(self.value(logits).data(), targets, r, c);
        let probs = Tensor::from_kernel(vec![r, c], probs, "ce_sum probs")?;
        let value = Tensor::from_kernel(vec![], vec![total as f32], "ce_sum")?;
        Ok(self.push(
            value,
            Some(total),
            self.wants_grad(&[logits]),
            Op::CeSum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let value = Tensor::from_kernel(vec![], vec![total as f32], "sum_all")?;
        Ok(self.push(value, Some(total), self.wants_grad(&[x]), Op::SumAll(x)))
    }

    /// Residual edit: add `scale * shift` to the selected rows of `x`.
    pub fn add_at_rows(
        &mut self,
        x: NodeId,
        shift: &Tensor,
        rows: RowSel,
        scale: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if shift.shape() != [c] {
            return Err(FvError::shape(format!(
                "add_at_rows shift {:?} on [{r},{c}]",
                shift.shape()
            )));
        }
        if !scale.is_finite() {
            return Err(FvError::NonFinite {
                op: "add_at_rows scale",
                index: 0,
            });
        }
        if let RowSel::One(i) = rows {
            if i >= r {
                return Err(FvError::shape(format!("add_at_rows row {i} >= {r}")));
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let base = &src[row * c..(row + 1) * c];
            if rows.contains(row, r) {
                for (j, &v) in base.iter().enumerate() {
                    data.push((v as f64 + scale * shift.data()[j] as f64) as f32);
                }
            } else {
                data.extend_from_slice(base);
            }
        }
        let value = Tensor::from_kernel(vec![r, c], data, "add_at_rows")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x]),
            Op::AddAtRows {
                x,
                shift: shift.clone(),
                rows,
                scale,
            },
        ))
    }

    /// `x` with row `row` replaced by `value` (a constant, no gradient).
    pub fn replace_row(&mut self, x: NodeId, row: usize, value: &Tensor) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if row >= r {
            return Err(FvError::shape(format!("replace_row {row} >= {r}")));
        }
        if value.shape() != [c] {
            return Err(FvError::shape(format!(
                "replace_row value {:?} on [{r},{c}]",
                value.shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        data[row * c..(row + 1) * c].copy_from_slice(value.data());
        let out = Tensor::from_kernel(vec![r, c], data, "replace_row")?;
        Ok(self.push(out, None, self.wants_grad(&[x]), Op::ReplaceRow { x, row }))
    }

    /// Project every row of `x` onto the complement of `unit` (unit-norm).
    pub fn project_out_rows(&mut self, x: NodeId, unit: &Tensor) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if unit.shape() != [c] {
            return Err(FvError::shape(format!(
                "project_out_rows unit {:?} on [{r},{c}]",
                unit.shape()
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            data.extend(kernels::project_out(
                &src[row * c..(row + 1) * c],
                unit.data(),
            ));
        }
        let value = Tensor::from_kernel(vec![r, c], data, "project_out_rows")?;
        Ok(self.push(
            value,
            None,
            self.wants_grad(&[x]),
            Op::ProjectOutRows {
                x,
                unit: unit.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss` node, seeding with `seed`.
    pub fn backward(&self, loss: NodeId, seed: f32) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(FvError::invalid(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, g) in grads.into_iter().enumerate() {
            match g {
                Some(v) if self.nodes[idx].needs_grad || idx == loss.0 => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    out.push(Some(Tensor::from_kernel(shape, v, "grad")?));
                }
                _ => out.push(None),
            }
        }
        Ok(Grads { grads: out })
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], target: NodeId, n: usize, contrib: &[f64]) {
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0f32; n]);
        for (s, &c) in slot.iter_mut().zip(contrib.iter()) {
            *s = (*s as f64 + c) as f32;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) -> Result<()> {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let n = g.len();
                let gd: Vec<f64> = g.iter().map(|&v| v as f64).collect();
                if needs(*a) {
                    Self::accumulate(grads, *a, n, &gd);
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, n, &gd);
                }
            }
            Op::AddRow(x, row) => {
                let (r, c) = self.value(*x).dims2()?;
                if needs(*x) {
                    let gd: Vec<f64> = g.iter().map(|&v| v as f64).collect();
                    Self::accumulate(grads, *x, r * c, &gd);
                }
                if needs(*row) {
                    let mut col = vec![0.0f64; c];
                    for i in 0..r {
                        for j in 0..c {
                            col[j] += g[i * c + j] as f64;
                        }
                    }
                    Self::accumulate(grads, *row, c, &col);
                }
            }
            Op::Mul(a, b) => {
                let n = g.len();
                if needs(*a) {
                    let vb = self.value(*b).data();
                    let gd: Vec<f64> = g
                        .iter()
                        .zip(vb.iter())
                        .map(|(&gv, &bv)| gv as f64 * bv as f64)
                        .collect();
                    Self::accumulate(grads, *a, n, &gd);
                }
                if needs(*b) {
                    let va = self.value(*a).data();
                    let gd: Vec<f64> = g
                        .iter()
                        .zip(va.iter())
                        .map(|(&gv, &av)| gv as f64 * av as f64)
                        .collect();
                    Self::accumulate(grads, *b, n, &gd);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let gd: Vec<f64> = g.iter().map(|&v| v as f64 * c).collect();
                    Self::accumulate(grads, *x, gd.len(), &gd);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if needs(*a) {
                    let da = kernels::matmul_tb(g, self.value(*b).data(), m, n, k);
                    let dad: Vec<f64> = da.iter().map(|&v| v as f64).collect();
                    Self::accumulate(grads, *a, m * k, &dad);
                }
                if needs(*b) {
                    let db = kernels::matmul_ta(self.value(*a).data(), g, k, m, n);
                    let dbd: Vec<f64> = db.iter().map(|&v| v as f64).collect();
                    Self::accumulate(grads, *b, k * n, &dbd);
                }
            }
            Op::MatMulTB(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if needs(*a) {
                    let da = kernels::matmul(g, self.value(*b).data(), m, n, k);
                    let dad: Vec<f64> = da.iter().map(|&v| v as f64).collect();
                    Self::accumulate(grads, *a, m * k, &dad);
                }
                if needs(*b) {
                    let db = kernels::matmul_ta(g, self.value(*a).data(), n, m, k);
                    let dbd: Vec<f64> = db.iter().map(|&v| v as f64).collect();
                    Self::accumulate(grads, *b, n * k, &dbd);
                }
            }
            Op::SliceCols { x, start, len } => {
                if needs(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..*len {
                            dx[i * c + start + j] = g[i * len + j] as f64;
                        }
                    }
                    Self::accumulate(grads, *x, r * c, &dx);
                }
            }
            Op::SliceRows { x, start, len } => {
                if needs(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0f64; r * c];
                    dx[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(g.iter())
                        .for_each(|(d, &gv)| *d = gv as f64);
                    Self::accumulate(grads, *x, r * c, &dx);
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let y = self.value(NodeId(idx)).data();
                    let (r, c) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0f64; r * c];
                    for i in 0..r {
                        let mut dotv = 0.0f64;
                        for j in 0..c {
                            dotv += g[i * c + j] as f64 * y[i * c + j] as f64;
                        }
                        for j in 0..c {
                            dx[i * c + j] = y[i * c + j] as f64 * (g[i * c + j] as f64 - dotv);
                        }
                    }
                    Self::accumulate(grads, *x, r * c, &dx);
                }
            }
            Op::CausalSoftmax(x) => {
                if needs(*x) {
                    let y = self.value(NodeId(idx)).data();
                    let (s, _) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0f64; s * s];
                    for i in 0..s {
                        let mut dotv = 0.0f64;
                        for j in 0..=i {
                            dotv += g[i * s + j] as f64 * y[i * s + j] as f64;
                        }
                        for j in 0..=i {
                            dx[i * s + j] = y[i * s + j] as f64 * (g[i * s + j] as f64 - dotv);
                        }
                    }
                    Self::accumulate(grads, *x, s * s, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (r, c) = self.value(*x).dims2()?;
                let vx = self.value(*x).data();
                let vg = self.value(*gamma).data();
                if needs(*x) {
                    let mut dx = vec![0.0f64; r * c];
                    for i in 0..r {
                        let (mean, rstd) = stats[i];
                        let mut sum_gh = 0.0f64;
                        let mut sum_ghx = 0.0f64;
                        for j in 0..c {
                            let xhat = (vx[i * c + j] as f64 - mean) * rstd;
                            let gh = g[i * c + j] as f64 * vg[j] as f64;
                            sum_gh += gh;
                            sum_ghx += gh * xhat;
                        }
                        let inv = 1.0 / c as f64;
                        for j in 0..c {
                            let xhat = (vx[i * c + j] as f64 - mean) * rstd;
                            let gh = g[i * c + j] as f64 * vg[j] as f64;
                            dx[i * c + j] = rstd * (gh - inv * sum_gh - xhat * inv * sum_ghx);
                        }
                    }
                    Self::accumulate(grads, *x, r * c, &dx);
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0f64; c];
                    for i in 0..r {
                        let (mean, rstd) = stats[i];
                        for j in 0..c {
                            let xhat = (vx[i * c + j] as f64 - mean) * rstd;
                            dg[j] += g[i * c + j] as f64 * xhat;
                        }
                    }
                    Self::accumulate(grads, *gamma, c, &dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0f64; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j] as f64;
                        }
                    }
                    Self::accumulate(grads, *beta, c, &db);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let vx = self.value(*x).data();
                    let gd: Vec<f64> = g
                        .iter()
                        .zip(vx.iter())
                        .map(|(&gv, &xv)| gv as f64 * kernels::gelu_grad(xv))
                        .collect();
                    Self::accumulate(grads, *x, gd.len(), &gd);
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let (r, c) = self.value(*table).dims2()?;
                    let mut dt = vec![0.0f64; r * c];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id as usize * c + j] += g[i * c + j] as f64;
                        }
                    }
                    Self::accumulate(grads, *table, r * c, &dt);
                }
            }
            Op::PickRows { x, rows } => {
                if needs(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0f64; r * c];
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[row * c + j] += g[i * c + j] as f64;
                        }
                    }
                    Self::accumulate(grads, *x, r * c, &dx);
                }
            }
            Op::CeSum {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let (r, c) = probs.dims2()?;
                    let seed = g[0] as f64;
                    let mut dl = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let p = probs.data()[i * c + j] as f64;
                            let y = if targets[i] as usize == j { 1.0 } else { 0.0 };
                            dl[i * c + j] = seed * (p - y);
                        }
                    }
                    Self::accumulate(grads, *logits, r * c, &dl);
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    let gd = vec![g[0] as f64; n];
                    Self::accumulate(grads, *x, n, &gd);
                }
            }
            Op::AddAtRows { x, .. } | Op::ReplaceRow { x, .. } => {
                if needs(*x) {
                    let mut gd: Vec<f64> = g.iter().map(|&v| v as f64).collect();
                    if let Op::ReplaceRow { row, .. } = &node.op {
                        let (_, c) = self.value(*x).dims2()?;
                        gd[row * c..(row + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    Self::accumulate(grads, *x, gd.len(), &gd);
                }
            }
            Op::ProjectOutRows { x, unit } => {
                if needs(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dx.extend(
                            kernels::project_out(&g[i * c..(i + 1) * c], unit.data())
                                .into_iter()
                                .map(|v| v as f64),
                        );
                    }
                    Self::accumulate(grads, *x, r * c, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::DetRng;

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap();
        let g = grads.expect(x).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap().with_grad());
        let c = tape.leaf(Tensor::new(vec![3], vec![7.0, 7.0, 7.0]).unwrap());
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap();
        assert!(grads.get(x).is_none());
        let _ = x;
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(tape.backward(x, 1.0).is_err());
    }

    #[test]
    fn replace_row_blocks_gradient_through_that_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let v = Tensor::new(vec![2], vec![9.0, 9.0]).unwrap();
        let y = tape.replace_row(x, 0, &v).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap();
        let g = grads.expect(x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn tape_forward_matches_free_ops() {
        let mut rng = DetRng::new(77);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng).unwrap();
        let free = crate::math::ops::matmul(&a, &b).unwrap();
        let mut tape = Tape::new();
        let na = tape.leaf(a);
        let nb = tape.leaf(b);
        let nc = tape.matmul(na, nb).unwrap();
        assert!(tape.value(nc).bit_eq(&free));
    }
}
