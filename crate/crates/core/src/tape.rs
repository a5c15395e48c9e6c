//! Reverse-mode differentiation over a minimal primitive set.
//!
//! A `Tape` records primitive applications in topological order (inputs are
//! created before outputs by construction) and caches every forward value.
//! `backward` walks the record once in reverse, producing exact
//! vector-Jacobian products that accumulate additively into per-node slots.
//!
//! The primitive set is closed: attention, the adapters, and both losses all
//! decompose into it, which keeps finite-difference coverage total.

use crate::linalg::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowOutOfRange { op: &'static str, index: usize, rows: usize },
    #[error("backward requires a 1x1 scalar node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Scale(VarId, f64),
    RowSoftmax(VarId),
    ConcatRows(VarId, VarId),
    SelectRows(VarId, Vec<usize>),
    Transpose(VarId),
    Tanh(VarId),
    Reshape(VarId),
    MseLoss(VarId, VarId),
    CrossEntropyRows(VarId, Vec<usize>),
    EmbedLookup(VarId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients produced by one backward pass, indexed by `VarId`.
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node; zeros if the node did not
    /// influence the loss.
    pub fn wrt(&self, id: VarId, like: &Matrix) -> Matrix {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(like.rows(), like.cols()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Cached forward value of a node.
    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// Record an input (leaf) value.
    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if (va.rows(), va.cols()) != (vb.rows(), vb.cols()) {
            return Err(shape_err("add", va, vb));
        }
        let value = va.add(vb);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a.0].value.scale(c);
        self.push(Op::Scale(a, c), value)
    }

    /// Numerically stabilized softmax along each row.
    pub fn row_softmax(&mut self, a: VarId) -> VarId {
        let value = row_softmax_value(&self.nodes[a.0].value);
        self.push(Op::RowSoftmax(a), value)
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(shape_err("concat_rows", va, vb));
        }
        let value = va.concat_rows(vb);
        Ok(self.push(Op::ConcatRows(a, b), value))
    }

    pub fn select_rows(&mut self, a: VarId, idx: &[usize]) -> Result<VarId, TapeError> {
        let va = &self.nodes[a.0].value;
        for &i in idx {
            if i >= va.rows() {
                return Err(TapeError::RowOutOfRange { op: "select_rows", index: i, rows: va.rows() });
            }
        }
        let value = va.select_rows(idx);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), value))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Row-major reinterpretation to a new shape with identical data.
    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> Result<VarId, TapeError> {
        let va = &self.nodes[a.0].value;
        if va.rows() * va.cols() != rows * cols {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                lhs_rows: va.rows(),
                lhs_cols: va.cols(),
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let value = Matrix::new(rows, cols, va.data().to_vec());
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Half squared Frobenius distance `0.5 * sum_ij (a - b)^2` as a 1x1 node.
    pub fn mse_loss(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if (va.rows(), va.cols()) != (vb.rows(), vb.cols()) {
            return Err(shape_err("mse_loss", va, vb));
        }
        let d = va.sub(vb);
        let value = Matrix::new(1, 1, vec![0.5 * d.data().iter().map(|x| x * x).sum::<f64>()]);
        Ok(self.push(Op::MseLoss(a, b), value))
    }

    /// Mean over rows of `-log softmax(row)[target]` as a 1x1 node.
    pub fn cross_entropy_rows(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId, TapeError> {
        let v = &self.nodes[logits.0].value;
        if targets.len() != v.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs_rows: v.rows(),
                lhs_cols: v.cols(),
                rhs_rows: targets.len(),
                rhs_cols: 1,
            });
        }
        for &t in targets {
            if t >= v.cols() {
                return Err(TapeError::RowOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    rows: v.cols(),
                });
            }
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let value = Matrix::new(1, 1, vec![total / targets.len() as f64]);
        Ok(self.push(Op::CrossEntropyRows(logits, targets.to_vec()), value))
    }

    /// Gather rows `ids` from an embedding table node.
    pub fn embed_lookup(&mut self, table: VarId, ids: &[usize]) -> Result<VarId, TapeError> {
        let v = &self.nodes[table.0].value;
        for &i in ids {
            if i >= v.rows() {
                return Err(TapeError::RowOutOfRange { op: "embed_lookup", index: i, rows: v.rows() });
            }
        }
        let value = v.select_rows(ids);
        Ok(self.push(Op::EmbedLookup(table, ids.to_vec()), value))
    }

    /// Reverse sweep from a scalar loss node. One pass per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients, TapeError> {
        if self.backward_done {
            return Err(TapeError::BackwardTwice);
        }
        self.backward_done = true;
        let lv = &self.nodes[loss.0].value;
        if (lv.rows(), lv.cols()) != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }

        let mut slots: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Matrix::new(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    slots[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut slots, *a, g.clone());
                    accumulate(&mut slots, *b, g);
                }
                Op::Scale(a, c) => {
                    let da = g.scale(*c);
                    accumulate(&mut slots, *a, da);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        let dr = da.row_mut(r);
                        for j in 0..yr.len() {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut slots, *a, da);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].value.rows();
                    let top: Vec<usize> = (0..ra).collect();
                    let bot: Vec<usize> = (ra..g.rows()).collect();
                    let da = g.select_rows(&top);
                    let db = g.select_rows(&bot);
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::SelectRows(a, idx) => {
                    let src_shape = {
                        let src = &self.nodes[a.0].value;
                        (src.rows(), src.cols())
                    };
                    let mut da = Matrix::zeros(src_shape.0, src_shape.1);
                    for (k, &r) in idx.iter().enumerate() {
                        let gr = g.row(k).to_vec();
                        let dr = da.row_mut(r);
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut slots, *a, da);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    accumulate(&mut slots, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = g.hadamard(&y.map(|t| 1.0 - t * t));
                    accumulate(&mut slots, *a, da);
                }
                Op::Reshape(a) => {
                    let src_shape = {
                        let src = &self.nodes[a.0].value;
                        (src.rows(), src.cols())
                    };
                    let da = Matrix::new(src_shape.0, src_shape.1, g.data().to_vec());
                    accumulate(&mut slots, *a, da);
                }
                Op::MseLoss(a, b) => {
                    let diff = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
                    let scale = g.get(0, 0);
                    accumulate(&mut slots, *a, diff.scale(scale));
                    accumulate(&mut slots, *b, diff.scale(-scale));
                }
                Op::CrossEntropyRows(a, targets) => {
                    let v = &self.nodes[a.0].value;
                    let scale = g.get(0, 0) / targets.len() as f64;
                    let sm = row_softmax_value(v);
                    let mut da = sm.scale(scale);
                    for (r, &t) in targets.iter().enumerate() {
                        let cur = da.get(r, t);
                        da.set(r, t, cur - scale);
                    }
                    accumulate(&mut slots, *a, da);
                }
                Op::EmbedLookup(table, ids) => {
                    let table_shape = {
                        let tv = &self.nodes[table.0].value;
                        (tv.rows(), tv.cols())
                    };
                    let mut dt = Matrix::zeros(table_shape.0, table_shape.1);
                    for (k, &r) in ids.iter().enumerate() {
                        let gr = g.row(k).to_vec();
                        let dr = dt.row_mut(r);
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut slots, *table, dt);
                }
            }
        }
        Ok(Gradients { slots })
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> TapeError {
    TapeError::ShapeMismatch {
        op,
        lhs_rows: a.rows(),
        lhs_cols: a.cols(),
        rhs_rows: b.rows(),
        rhs_cols: b.cols(),
    }
}

fn accumulate(slots: &mut [Option<Matrix>], id: VarId, g: Matrix) {
    match &mut slots[id.0] {
        Some(existing) => *existing = existing.add(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_softmax_value(v: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for r in 0..v.rows() {
        let row = v.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let or = out.row_mut(r);
        for (o, e) in or.iter_mut().zip(exps) {
            *o = e / sum;
        }
    }
    out
}

/// A named tensor with a gradient slot. Frozen params (`trainable = false`)
/// may receive gradients during backward but are never updated.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters shared by tape builders and optimizers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Register every param value as a leaf on `tape`; the returned ids are
    /// aligned with param order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<VarId> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Pull gradients for the bound leaves back into the param slots.
    pub fn absorb_grads(&mut self, binds: &[VarId], grads: &Gradients) {
        for (p, &id) in self.params.iter_mut().zip(binds) {
            p.grad = grads.wrt(id, &p.value);
        }
    }

    /// Add `other`'s gradients into `self`'s slots (plain summation).
    pub fn accumulate_grads(&mut self, other: &ParamSet) {
        for (p, q) in self.params.iter_mut().zip(other.iter()) {
            p.grad = p.grad.add(&q.grad);
        }
    }

    /// Total number of scalar coordinates in trainable params.
    pub fn trainable_coords(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.rows() * p.value.cols())
            .sum()
    }

    /// Euclidean norm over gradients of trainable params.
    pub fn trainable_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let n = p.grad.frob_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Compare tape gradients against central finite differences.
///
/// `build` must construct a scalar-valued forward from the bound param
/// leaves. Returns the max over all trainable coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut build: F, params: &mut ParamSet, eps: f64) -> f64
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId, TapeError>,
{
    assert!((1e-7..=1e-4).contains(&eps), "eps must lie in [1e-7, 1e-4]");

    let eval = |params: &ParamSet, build: &mut F| -> f64 {
        let mut tape = Tape::new();
        let binds = params.bind(&mut tape);
        let loss = build(&mut tape, &binds).expect("grad_check forward failed");
        tape.value(loss).get(0, 0)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape);
    let loss = build(&mut tape, &binds).expect("grad_check forward failed");
    let grads = tape.backward(loss).expect("backward failed");
    params.absorb_grads(&binds, &grads);

    let analytic: Vec<Matrix> = params.iter().map(|p| p.grad.clone()).collect();

    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        if !params.get(ParamId(pi)).trainable {
            continue;
        }
        let (rows, cols) = {
            let v = &params.get(ParamId(pi)).value;
            (v.rows(), v.cols())
        };
        for i in 0..rows {
            for j in 0..cols {
                let orig = params.get(ParamId(pi)).value.get(i, j);
                params.get_mut(ParamId(pi)).value.set(i, j, orig + eps);
                let f_plus = eval(params, &mut build);
                params.get_mut(ParamId(pi)).value.set(i, j, orig - eps);
                let f_minus = eval(params, &mut build);
                params.get_mut(ParamId(pi)).value.set(i, j, orig);

                let numeric = (f_plus - f_minus) / (2.0 * eps);
                let a = analytic[pi].get(i, j);
                let rel = (a - numeric).abs() / numeric.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    max_rel
}
