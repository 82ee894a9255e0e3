//! Matrix-level tape for reverse-mode differentiation.
//!
//! Every primitive pushes a node holding its output value and enough cached
//! state to run its adjoint. Node ids increase monotonically, so walking the
//! tape backwards visits nodes in reverse topological order.

use std::borrow::Cow;
use std::ops::Range;

use super::matrix::{dot, Matrix};
use crate::error::{shape_err, MeloError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg_len: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        range: Range<usize>,
    },
    SliceRows {
        x: Var,
        range: Range<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    // false when no trainable leaf feeds this node
    grad: bool,
}

/// Records primitive operations for one forward pass. Leaves may borrow
/// matrices (frozen weights) for the lifetime `'a` instead of copying them.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `var`; all zeros when the node is not on a path to the loss.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Matrix {
        let (r, c) = self.shapes[var.0];
        self.grads[var.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => true,
            op => op.inputs().iter().any(|v| self.nodes[v.0].grad),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Matrix, op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op))
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that borrows `value`.
    pub fn borrow(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that never receives a gradient. Nodes computed only from
    /// constants are skipped by [`Tape::backward`].
    pub fn constant(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push_checked("matmul_nt", out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push_checked("add", out, Op::Add(a, b))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        let b = bv.data();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push_checked("add_row", out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scale(factor);
        self.push_checked("scale", out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Matrix::from_vec(src.rows(), src.cols(), data).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.tanh()).collect();
        let out = Matrix::from_vec(src.rows(), src.cols(), data).expect("same shape");
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `(n_seq * seg_len) x width`; rows of one sequence are
    /// contiguous and sequences never attend to each other. Heads split the
    /// width into equal contiguous column groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = qv.shape();
        if kv.shape() != (n, width) || vv.shape() != (n, width) {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || width % heads != 0 || seg_len == 0 || n % seg_len != 0 {
            return Err(shape_err(
                "attention",
                format!("{n} rows, width {width}, {heads} heads, segment {seg_len}"),
            ));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seg = n / seg_len;
        let mut probs = vec![0.0; n_seg * heads * seg_len * seg_len];
        let mut out = Matrix::zeros(n, width);
        let mut scores = vec![0.0; seg_len];
        for s in 0..n_seg {
            let base = s * seg_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seg_len {
                    let visible = if causal { i + 1 } else { seg_len };
                    let qi = &qv.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate().take(visible) {
                        *sc = dot(qi, &kv.row(base + j)[cols.clone()]) * scale;
                        max = max.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(visible) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let p_off = ((s * heads + h) * seg_len + i) * seg_len;
                    let orow = &mut out.row_mut(base + i)[cols.clone()];
                    for j in 0..visible {
                        let p = scores[j] / z;
                        probs[p_off + j] = p;
                        let vj = &vv.row(base + j)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push_checked(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_len,
                causal,
                probs,
            },
        )
    }

    /// Gathers rows `ids` of `table`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(MeloError::Index(format!(
                "embedding id {bad} with {} rows",
                tv.rows()
            )));
        }
        let cols = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Matrix::from_vec(ids.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(MeloError::Index(format!("row {bad} of {}", xv.rows())));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Matrix::from_vec(rows.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let out = self.value(x).slice_cols(range.clone())?;
        Ok(self.push(out, Op::SliceCols { x, range }))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let out = self.value(x).slice_rows(range.clone())?;
        Ok(self.push(out, Op::SliceRows { x, range }))
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logit rows, {} targets", lv.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(MeloError::Index(format!(
                "target {bad} with {} classes",
                lv.cols()
            )));
        }
        lv.ensure_finite("cross_entropy logits")?;
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let (lse, p) = log_softmax_row(lv.row(r));
            total += lse - lv.get(r, t);
            probs.row_mut(r).copy_from_slice(&p);
        }
        let loss = Matrix::row_vector(&[total / targets.len() as f64]);
        self.push_checked(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::row_vector(&[s]), Op::Sum(x))
    }

    /// Propagates `d loss / d node` to every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(MeloError::Contract(format!(
                "loss node {} not on a tape of {} nodes",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(MeloError::Contract(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if self.nodes[var.0].grad {
            accumulate_into(grads, var, g);
        }
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].grad {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.nodes[b.0].grad {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ  =>  da = g b,  db = gᵀ a
                if self.nodes[a.0].grad {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.nodes[b.0].grad {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *bias, db);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scale(*f)),
            Op::Relu(a) => {
                let out = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Tanh(a) => {
                let out = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| gv * (1.0 - o * o))
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).data();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                        dgain.data_mut()[c] += gr[c] * hr[c];
                        dbias.data_mut()[c] += gr[c];
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_len,
                causal,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, width) = qv.shape();
                let (heads, seg_len) = (*heads, *seg_len);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(n, width);
                let mut dk = Matrix::zeros(n, width);
                let mut dv = Matrix::zeros(n, width);
                let mut dp = vec![0.0; seg_len];
                for s in 0..n / seg_len {
                    let base = s * seg_len;
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..seg_len {
                            let visible = if *causal { i + 1 } else { seg_len };
                            let p_off = ((s * heads + h) * seg_len + i) * seg_len;
                            let p = &probs[p_off..p_off + visible];
                            let gi = &g.row(base + i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                dp[j] = dot(gi, &vv.row(base + j)[cols.clone()]);
                                weighted += p[j] * dp[j];
                                let dvj = &mut dv.row_mut(base + j)[cols.clone()];
                                for (d, x) in dvj.iter_mut().zip(gi) {
                                    *d += p[j] * x;
                                }
                            }
                            for j in 0..visible {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(base + j)[cols.clone()];
                                let dqi = &mut dq.row_mut(base + i)[cols.clone()];
                                for (d, x) in dqi.iter_mut().zip(kj) {
                                    *d += ds * x;
                                }
                                let qi = &qv.row(base + i)[cols.clone()];
                                let dkj = &mut dk.row_mut(base + j)[cols.clone()];
                                for (d, x) in dkj.iter_mut().zip(qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, range } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[range.clone()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, range } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, src) in range.clone().enumerate() {
                    dx.row_mut(src).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g.get(0, 0) / targets.len() as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= upstream;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embed { table, .. } => vec![*table],
            Op::SelectRows { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

fn accumulate_into(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Returns `(logsumexp(row), softmax(row))`.
pub(crate) fn log_softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (max + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

/// Softmax cross-entropy of a single `1 x k` logit row against `target`.
pub fn softmax_cross_entropy(logits: &Matrix, target: usize) -> Result<f64> {
    if logits.rows() != 1 {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("expected one logit row, got {:?}", logits.shape()),
        ));
    }
    if target >= logits.cols() {
        return Err(MeloError::Index(format!(
            "target {target} with {} classes",
            logits.cols()
        )));
    }
    logits.ensure_finite("softmax_cross_entropy logits")?;
    let (lse, _) = log_softmax_row(logits.row(0));
    Ok((lse - logits.get(0, target)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 5, 11] {
            let loss = softmax_cross_entropy(&Matrix::filled(1, k, 0.7), 0).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let loss = softmax_cross_entropy(&Matrix::row_vector(&[20.0, -20.0]), 0).unwrap();
        assert!(loss <= 1e-8);
    }

    #[test]
    fn cross_entropy_matches_scalar_formula() {
        // Independent scalar route: -ln(e^2 / (e^1 + e^2)).
        let oracle = -((2.0f64).exp() / ((1.0f64).exp() + (2.0f64).exp())).ln();
        let loss = softmax_cross_entropy(&Matrix::row_vector(&[1.0, 2.0]), 1).unwrap();
        assert!((loss - oracle).abs() < 1e-15);
        assert!((oracle - 0.313_261_687_518_222_9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let err = softmax_cross_entropy(&Matrix::row_vector(&[f64::NAN, 0.0]), 0).unwrap_err();
        assert!(matches!(err, MeloError::Numeric(_)));
        let mut tape = Tape::new();
        let l = tape.leaf(Matrix::row_vector(&[f64::INFINITY, 0.0]));
        assert!(matches!(tape.cross_entropy(l, &[0]), Err(MeloError::Numeric(_))));
    }

    #[test]
    fn linear_sum_gradient_is_broadcast_input() {
        // loss = sum(x · W) with x fixed  =>  dW[i][j] = x[i]
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let w = tape.leaf(Matrix::gaussian(3, 4, 1.0, &mut seeded(9)));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().get(w);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.get(i, j), [1.0, -2.0, 3.0][i]);
            }
        }
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let unused = tape.leaf(Matrix::filled(2, 2, 3.0));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn leaf_only_tape_has_zero_gradients_elsewhere() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(2, 3, 1.0));
        let loss = tape.leaf(Matrix::row_vector(&[4.0]));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a), Matrix::zeros(2, 3));
        assert_eq!(grads.get(loss), Matrix::row_vector(&[1.0]));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(MeloError::Contract(_))));
    }
}
