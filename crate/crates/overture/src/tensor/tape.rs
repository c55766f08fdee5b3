//! Reverse-mode gradient tape over a fixed operation set.
//!
//! A [`Tape`] records operations as they execute (define-by-run). Calling
//! [`Tape::backward`] on a scalar node accumulates gradients for every node,
//! and [`Tape::accumulate_param_grads`] exports them into the originating
//! [`ParamStore`](super::params::ParamStore) slots.
//!
//! The operation set is exactly what the decision model needs: matmul,
//! broadcast add, softmax, sigmoid, GELU, layer norm, concat/slice/gather,
//! grouped max-pooling, and the two cross-entropy reductions. Backward rules
//! are hand-derived and verified by the finite-difference suite.

use super::params::ParamStore;
use super::{clamp_prob, matmul_into, softmax, Scalar, Tensor, CLAMP_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Const,
    Param { store_index: usize },
    MatMul(NodeId, NodeId),
    /// `a @ b^T`
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over rows.
    AddRow { matrix: NodeId, row: NodeId },
    Scale(NodeId, T),
    /// Plus a constant tensor (e.g. an attention mask); no gradient to it.
    AddConst(NodeId),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Normalized rows, cached for backward.
        normed: Tensor<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, end: usize },
    /// Output row i = input row indices[i]; repeated indices scatter-add.
    GatherRows { input: NodeId, indices: Vec<usize> },
    /// Elementwise max over a set of input rows; 1 x cols output.
    MaxPoolRows {
        input: NodeId,
        rows: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// Masked sum of binary cross-entropies over an elementwise probability
    /// tensor.
    BceSum {
        pred: NodeId,
        labels: Vec<T>,
        mask: Vec<bool>,
    },
    /// Sum of cross-entropies of selected probability rows against target
    /// distributions.
    CeRows {
        pred: NodeId,
        rows: Vec<usize>,
        targets: Vec<Vec<T>>,
    },
    SumScalars(Vec<NodeId>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Const)
    }

    /// Copy a parameter onto the tape; its gradient can later be exported
    /// back to the store slot.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        let idx = store.index_of(name)?;
        Ok(self.push(store.value_at(idx).clone(), Op::Param { store_index: idx }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = super::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(matrix).rows_cols();
        let (rr, rc) = self.value(row).rows_cols();
        if rr != 1 || rc != c {
            return Err(Error::Dimension(format!(
                "add_row: matrix {:?} + row {:?}",
                self.value(matrix).shape(),
                self.value(row).shape()
            )));
        }
        let (r, _) = self.value(matrix).rows_cols();
        let mut out = self.value(matrix).clone();
        {
            let rv: Vec<T> = self.value(row).data().to_vec();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] += rv[j];
                }
            }
        }
        Ok(self.push(out, Op::AddRow { matrix, row }))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, constant: &Tensor<T>) -> Result<NodeId> {
        if self.value(a).shape() != constant.shape() {
            return Err(Error::Dimension(format!(
                "add_const: {:?} vs {:?}",
                self.value(a).shape(),
                constant.shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(constant);
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = super::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = super::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(input).rows_cols();
        let (_, gc) = self.value(gain).rows_cols();
        let (_, bc) = self.value(bias).rows_cols();
        if gc != c || bc != c {
            return Err(Error::Dimension(format!(
                "layer_norm: width {c}, gain {gc}, bias {bc}"
            )));
        }
        let eps = T::from_f64(1e-5);
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![T::zero(); r * c];
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let cn = T::from_f64(c as f64);
        for i in 0..r {
            let xr = &x[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &v in xr {
                mean += v;
            }
            mean /= cn;
            let mut var = T::zero();
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var /= cn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let nv = (xr[j] - mean) * istd;
                normed[i * c + j] = nv;
                out[i * c + j] = g[j] * nv + b[j];
            }
        }
        let normed = Tensor::new(vec![r, c], normed)?;
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (r, _) = self.value(parts[0]).rows_cols();
        let mut total = 0usize;
        for &p in parts {
            let (pr, pc) = self.value(p).rows_cols();
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({pr} vs {r})"
                )));
            }
            total += pc;
        }
        let mut out = vec![T::zero(); r * total];
        let mut offset = 0usize;
        for &p in parts {
            let (_, pc) = self.value(p).rows_cols();
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, c) = self.value(parts[0]).rows_cols();
        let mut total = 0usize;
        for &p in parts {
            let (pr, pc) = self.value(p).rows_cols();
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths differ ({pc} vs {c})"
                )));
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![total, c], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.value(input).rows_cols();
        if end > c || start >= end {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {end}) of width {c}"
            )));
        }
        let w = end - start;
        let mut out = vec![T::zero(); r * w];
        let d = self.value(input).data();
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&d[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        Ok(self.push(out, Op::SliceCols { input, start, end }))
    }

    pub fn gather_rows(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(input).rows_cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            if ix >= r {
                return Err(Error::Input(format!(
                    "gather_rows: index {ix} out of {r} rows"
                )));
            }
            out.extend_from_slice(self.value(input).row(ix));
        }
        let out = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Elementwise max over the given rows of `input`, as a 1 x cols tensor.
    /// Ties go to the first row, which keeps backward deterministic.
    pub fn max_pool_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Input("max_pool_rows: empty row set".into()));
        }
        let (r, c) = self.value(input).rows_cols();
        for &ix in rows {
            if ix >= r {
                return Err(Error::Input(format!(
                    "max_pool_rows: row {ix} out of {r}"
                )));
            }
        }
        let d = self.value(input).data();
        let mut out = vec![T::zero(); c];
        let mut argmax = vec![0usize; c];
        for (j, (o, am)) in out.iter_mut().zip(argmax.iter_mut()).enumerate() {
            let mut best = d[rows[0] * c + j];
            let mut best_row = rows[0];
            for &ix in &rows[1..] {
                let v = d[ix * c + j];
                if v > best {
                    best = v;
                    best_row = ix;
                }
            }
            *o = best;
            *am = best_row;
        }
        let out = Tensor::new(vec![1, c], out)?;
        Ok(self.push(
            out,
            Op::MaxPoolRows {
                input,
                rows: rows.to_vec(),
                argmax,
            },
        ))
    }

    /// Masked sum of binary cross-entropies: `sum_i mask_i * bce(label_i, pred_i)`.
    ///
    /// Probabilities are clamped to `[eps, 1-eps]`; the gradient is the exact
    /// derivative of the clamped expression (zero where the clamp is active).
    pub fn bce_sum(&mut self, pred: NodeId, labels: &[T], mask: &[bool]) -> Result<NodeId> {
        let n = self.value(pred).numel();
        if labels.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "bce_sum: pred {n}, labels {}, mask {}",
                labels.len(),
                mask.len()
            )));
        }
        let d = self.value(pred).data();
        let mut loss = T::zero();
        for i in 0..n {
            if mask[i] {
                loss += super::binary_cross_entropy(labels[i], d[i]);
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceSum {
                pred,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Sum of cross-entropies of the selected probability rows against the
    /// paired target distributions.
    pub fn ce_rows(&mut self, pred: NodeId, rows: &[usize], targets: &[Vec<T>]) -> Result<NodeId> {
        let (r, c) = self.value(pred).rows_cols();
        if rows.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "ce_rows: {} rows vs {} targets",
                rows.len(),
                targets.len()
            )));
        }
        for (&row, t) in rows.iter().zip(targets.iter()) {
            if row >= r {
                return Err(Error::Input(format!("ce_rows: row {row} out of {r}")));
            }
            if t.len() != c {
                return Err(Error::Dimension(format!(
                    "ce_rows: target len {} vs {c} classes",
                    t.len()
                )));
            }
            let sum: f64 = t.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Label(format!(
                    "ce_rows: target sums to {sum}, expected 1"
                )));
            }
        }
        let mut loss = T::zero();
        for (&row, t) in rows.iter().zip(targets.iter()) {
            let p = self.value(pred).row(row);
            for (&tv, &pv) in t.iter().zip(p.iter()) {
                if tv != T::zero() {
                    loss -= tv * clamp_prob(pv).ln();
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CeRows {
                pred,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = T::zero();
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(Error::Dimension("sum_scalars: non-scalar input".into()));
            }
            total += self.value(p).data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::SumScalars(parts.to_vec())))
    }

    /// Scaled dot-product attention composed from primitive ops.
    pub fn attention(
        &mut self,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        additive_mask: &Tensor<T>,
    ) -> Result<NodeId> {
        let (_, dq) = self.value(queries).rows_cols();
        let (nk, dk) = self.value(keys).rows_cols();
        let (nv, _) = self.value(values).rows_cols();
        if dq != dk {
            return Err(Error::Dimension(format!(
                "attention: query width {dq} != key width {dk}"
            )));
        }
        if nk != nv {
            return Err(Error::Dimension(format!(
                "attention: {nk} keys vs {nv} value rows"
            )));
        }
        let scores = self.matmul_bt(queries, keys)?;
        let scaled = self.scale(scores, T::from_f64(1.0 / (dq as f64).sqrt()));
        let masked = self.add_const(scaled, additive_mask)?;
        let weights = self.softmax_rows(masked);
        self.matmul(weights, values)
    }

    /// Run reverse accumulation from a scalar node. Returns per-node grads.
    fn backward_internal(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(
                "backward: loss node must be scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        idx: usize,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let ensure = |grads: &mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(shape.to_vec()));
            }
        };
        match &self.nodes[idx].op {
            Op::Const | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                // C = A B: dA += dC B^T, dB += A^T dC
                let (m, n) = gout.rows_cols();
                let (_, k) = self.value(*a).rows_cols();
                ensure(grads, *a, self.value(*a).shape());
                {
                    let bd = self.value(*b).data();
                    let ga = grads[a.0].as_mut().unwrap().data_mut();
                    // dA[i,p] += sum_j dC[i,j] * B[p,j]
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += super::dot(
                                &gout.data()[i * n..(i + 1) * n],
                                &bd[p * n..(p + 1) * n],
                            );
                        }
                    }
                }
                ensure(grads, *b, self.value(*b).shape());
                {
                    let ad = self.value(*a).data();
                    let gb = grads[b.0].as_mut().unwrap().data_mut();
                    // dB[p,j] += sum_i A[i,p] * dC[i,j]
                    for i in 0..m {
                        let grow = &gout.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for (bv, &gv) in brow.iter_mut().zip(grow.iter()) {
                                *bv += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                // C = A B^T: dA += dC B, dB += dC^T A
                let (m, n) = gout.rows_cols();
                let (_, k) = self.value(*a).rows_cols();
                ensure(grads, *a, self.value(*a).shape());
                {
                    let bd = self.value(*b).data();
                    let ga = grads[a.0].as_mut().unwrap().data_mut();
                    matmul_into(ga, gout.data(), bd, m, n, k);
                }
                ensure(grads, *b, self.value(*b).shape());
                {
                    let ad = self.value(*a).data();
                    let gb = grads[b.0].as_mut().unwrap().data_mut();
                    // dB[j,p] += sum_i dC[i,j] * A[i,p]
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        for j in 0..n {
                            let g = gout.data()[i * n + j];
                            let brow = &mut gb[j * k..(j + 1) * k];
                            for (bv, &av) in brow.iter_mut().zip(arow.iter()) {
                                *bv += g * av;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    ensure(grads, *id, gout.shape());
                    grads[id.0].as_mut().unwrap().add_assign(gout);
                }
            }
            Op::AddRow { matrix, row } => {
                ensure(grads, *matrix, gout.shape());
                grads[matrix.0].as_mut().unwrap().add_assign(gout);
                ensure(grads, *row, self.value(*row).shape());
                let (r, c) = gout.rows_cols();
                let gr = grads[row.0].as_mut().unwrap().data_mut();
                for i in 0..r {
                    for j in 0..c {
                        gr[j] += gout.data()[i * c + j];
                    }
                }
            }
            Op::Scale(a, c) => {
                ensure(grads, *a, gout.shape());
                let ga = grads[a.0].as_mut().unwrap().data_mut();
                for (g, &go) in ga.iter_mut().zip(gout.data().iter()) {
                    *g += *c * go;
                }
            }
            Op::AddConst(a) => {
                ensure(grads, *a, gout.shape());
                grads[a.0].as_mut().unwrap().add_assign(gout);
            }
            Op::SoftmaxRows(a) => {
                // dx_i = p_i * (dy_i - sum_j p_j dy_j) per row
                let p = &self.nodes[idx].value;
                let (r, c) = p.rows_cols();
                ensure(grads, *a, p.shape());
                let ga = grads[a.0].as_mut().unwrap().data_mut();
                for i in 0..r {
                    let pr = &p.data()[i * c..(i + 1) * c];
                    let gr = &gout.data()[i * c..(i + 1) * c];
                    let mut s = T::zero();
                    for (pv, gv) in pr.iter().zip(gr.iter()) {
                        s += *pv * *gv;
                    }
                    for j in 0..c {
                        ga[i * c + j] += pr[j] * (gr[j] - s);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                ensure(grads, *a, y.shape());
                let ga = grads[a.0].as_mut().unwrap().data_mut();
                for ((g, &yv), &go) in ga.iter_mut().zip(y.data().iter()).zip(gout.data().iter()) {
                    *g += go * yv * (T::one() - yv);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                ensure(grads, *a, x.shape());
                let ga = grads[a.0].as_mut().unwrap().data_mut();
                for ((g, &xv), &go) in ga.iter_mut().zip(x.data().iter()).zip(gout.data().iter()) {
                    *g += go * gelu_bwd(xv);
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (r, c) = normed.rows_cols();
                let g = self.value(*gain).data();
                ensure(grads, *gain, self.value(*gain).shape());
                ensure(grads, *bias, self.value(*bias).shape());
                ensure(grads, *input, self.value(*input).shape());
                {
                    let gg = grads[gain.0].as_mut().unwrap().data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gout.data()[i * c + j] * normed.data()[i * c + j];
                        }
                    }
                }
                {
                    let gb = grads[bias.0].as_mut().unwrap().data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += gout.data()[i * c + j];
                        }
                    }
                }
                {
                    let gi = grads[input.0].as_mut().unwrap().data_mut();
                    let cn = T::from_f64(c as f64);
                    for i in 0..r {
                        // dxhat = dy * gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..c {
                            let dxh = gout.data()[i * c + j] * g[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * normed.data()[i * c + j];
                        }
                        mean_dxh /= cn;
                        mean_dxh_xh /= cn;
                        for j in 0..c {
                            let dxh = gout.data()[i * c + j] * g[j];
                            gi[i * c + j] += inv_std[i]
                                * (dxh - mean_dxh - normed.data()[i * c + j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = gout.rows_cols();
                let mut offset = 0usize;
                for &p in parts {
                    let (_, pc) = self.value(p).rows_cols();
                    ensure(grads, p, self.value(p).shape());
                    let gp = grads[p.0].as_mut().unwrap().data_mut();
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] += gout.data()[i * total + offset + j];
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let (_, c) = gout.rows_cols();
                let mut row = 0usize;
                for &p in parts {
                    let (pr, _) = self.value(p).rows_cols();
                    ensure(grads, p, self.value(p).shape());
                    let gp = grads[p.0].as_mut().unwrap().data_mut();
                    for (gv, &ov) in gp
                        .iter_mut()
                        .zip(gout.data()[row * c..(row + pr) * c].iter())
                    {
                        *gv += ov;
                    }
                    row += pr;
                }
            }
            Op::SliceCols { input, start, .. } => {
                let (r, w) = gout.rows_cols();
                let (_, c) = self.value(*input).rows_cols();
                ensure(grads, *input, self.value(*input).shape());
                let gi = grads[input.0].as_mut().unwrap().data_mut();
                for i in 0..r {
                    for j in 0..w {
                        gi[i * c + start + j] += gout.data()[i * w + j];
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                let (_, c) = gout.rows_cols();
                ensure(grads, *input, self.value(*input).shape());
                let gi = grads[input.0].as_mut().unwrap().data_mut();
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        gi[ix * c + j] += gout.data()[i * c + j];
                    }
                }
            }
            Op::MaxPoolRows { input, argmax, .. } => {
                let (_, c) = self.value(*input).rows_cols();
                ensure(grads, *input, self.value(*input).shape());
                let gi = grads[input.0].as_mut().unwrap().data_mut();
                for (j, &row) in argmax.iter().enumerate() {
                    gi[row * c + j] += gout.data()[j];
                }
            }
            Op::BceSum { pred, labels, mask } => {
                let g = gout.scalar_value();
                let p = self.value(*pred);
                ensure(grads, *pred, p.shape());
                let gp = grads[pred.0].as_mut().unwrap().data_mut();
                let lo = T::from_f64(CLAMP_EPS);
                let hi = T::one() - lo;
                for i in 0..labels.len() {
                    if !mask[i] {
                        continue;
                    }
                    let pv = p.data()[i];
                    // Clamp active: derivative of the computed loss is zero.
                    if pv < lo || pv > hi {
                        continue;
                    }
                    let t = labels[i];
                    gp[i] += g * (-(t / pv) + (T::one() - t) / (T::one() - pv));
                }
            }
            Op::CeRows {
                pred,
                rows,
                targets,
            } => {
                let g = gout.scalar_value();
                let p = self.value(*pred);
                let (_, c) = p.rows_cols();
                ensure(grads, *pred, p.shape());
                let gp = grads[pred.0].as_mut().unwrap().data_mut();
                let lo = T::from_f64(CLAMP_EPS);
                let hi = T::one() - lo;
                for (&row, t) in rows.iter().zip(targets.iter()) {
                    for j in 0..c {
                        let tv = t[j];
                        if tv == T::zero() {
                            continue;
                        }
                        let pv = p.data()[row * c + j];
                        if pv < lo || pv > hi {
                            continue;
                        }
                        gp[row * c + j] -= g * tv / pv;
                    }
                }
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    ensure(grads, p, self.value(p).shape());
                    grads[p.0].as_mut().unwrap().data_mut()[0] += gout.scalar_value();
                }
            }
        }
        Ok(())
    }

    /// Backward pass plus export of parameter gradients into the store.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward_internal(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads.into_iter()) {
            if let (Op::Param { store_index }, Some(g)) = (&node.op, grad) {
                store.grad_at_mut(*store_index).add_assign(&g);
            }
        }
        Ok(())
    }

    /// Backward pass returning parameter gradients as an indexed vector
    /// (aligned with the store) instead of writing into the store. Used by
    /// batch-parallel training.
    pub fn backward_to_vec(&self, loss: NodeId, store_len: usize) -> Result<Vec<Option<Tensor<T>>>> {
        let grads = self.backward_internal(loss)?;
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store_len];
        for (node, grad) in self.nodes.iter().zip(grads.into_iter()) {
            if let (Op::Param { store_index }, Some(g)) = (&node.op, grad) {
                match &mut out[*store_index] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    /// Gradient of an arbitrary node (test helper).
    pub fn grad_of(&self, loss: NodeId, node: NodeId) -> Result<Option<Tensor<T>>> {
        let mut grads = self.backward_internal(loss)?;
        Ok(grads[node.0].take())
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation; smooth, so finite differences agree.
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::super::params::ParamStore;
    use super::*;

    fn seeded(vals: &[f64]) -> Tensor<f64> {
        Tensor::vector(vals.to_vec())
    }

    #[test]
    fn softmax_then_ce_gradient_is_p_minus_target() {
        // Composed gradient through softmax + cross-entropy must equal
        // (p - target) at the logits.
        let mut state = 42u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 4.0
        };
        for _ in 0..30 {
            let logits: Vec<f64> = (0..6).map(|_| next()).collect();
            let mut raw: Vec<f64> = (0..6).map(|_| next().abs() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            for v in raw.iter_mut() {
                *v /= s;
            }

            let mut store = ParamStore::<f64>::new();
            store
                .register("logits", Tensor::matrix(1, 6, logits.clone()).unwrap())
                .unwrap();
            let mut tape = Tape::new();
            let x = tape.param(&store, "logits").unwrap();
            let p = tape.softmax_rows(x);
            let loss = tape.ce_rows(p, &[0], &[raw.clone()]).unwrap();
            tape.backward(loss, &mut store).unwrap();

            let probs = super::super::softmax(&logits);
            let grad = store.grad("logits").unwrap();
            for j in 0..6 {
                let expected = probs[j] - raw[j];
                assert!(
                    (grad.data()[j] - expected).abs() < 1e-9,
                    "grad {} vs {}",
                    grad.data()[j],
                    expected
                );
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut store = ParamStore::<f64>::new();
        store
            .register(
                "x",
                Tensor::matrix(3, 2, vec![1.0, 9.0, 5.0, 2.0, 3.0, 4.0]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let pooled = tape.max_pool_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(pooled).data(), &[5.0, 9.0]);
        let loss = tape
            .bce_sum(pooled, &[1.0, 1.0], &[true, true])
            .unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = store.grad("x").unwrap();
        // Only (row 1, col 0) and (row 0, col 1) receive gradient.
        assert!(g.data()[2] != 0.0 && g.data()[1] != 0.0);
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert_eq!(g.data()[4], 0.0);
        assert_eq!(g.data()[5], 0.0);
    }

    #[test]
    fn attention_node_matches_plain_attention() {
        let q = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]).unwrap();
        let k = Tensor::matrix(2, 3, vec![0.7, -0.1, 0.2, -0.4, 0.3, 0.9]).unwrap();
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::<f64>::new();
        let qn = tape.constant(q.clone());
        let kn = tape.constant(k.clone());
        let vn = tape.constant(v.clone());
        let out = tape.attention(qn, kn, vn, &mask).unwrap();
        let plain = super::super::attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn unused_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.register("used", seeded(&[0.3, 0.4])).unwrap();
        store.register("unused", seeded(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "used").unwrap();
        let s = tape.sigmoid(x);
        let loss = tape.bce_sum(s, &[1.0, 0.0], &[true, true]).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("unused").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.grad("used").unwrap().data().iter().any(|&v| v != 0.0));
    }
}
