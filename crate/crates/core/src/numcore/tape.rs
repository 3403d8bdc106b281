//! Reverse-mode gradient tape over a fixed primitive set.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs for the backward pass. Nodes are appended in evaluation order,
//! so walking the tape backwards is a reverse topological order and each
//! node is visited exactly once.
//!
//! Stochastic inputs (Gumbel noise, dropout masks) enter the tape as
//! constants captured at forward time.

use std::sync::Arc;

use super::sparse::{spmm_transpose_with, spmm_with};
use super::{DenseMatrix, NumError, Rng, SparseAdj};

/// Index of a trainable matrix in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseMatrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.values().len()).sum()
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<DenseMatrix>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(
            store
                .values
                .iter()
                .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        )
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate gradient-rule corruption, used to show that the gradient
/// checker actually detects broken rules.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Scales the right-operand gradient of `matmul_t` by 1.01.
    MatMulTRight,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Spmm(Arc<SparseAdj>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gate { m: Var, e: Var, k: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Dropout { x: Var, mask: Vec<f64> },
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    RowSlice { x: Var, start: usize },
    Sum(Var),
    MaskedRowMean { x: Var, rows: Arc<[usize]> },
    CrossEntropy { logits: Var, labels: Arc<[usize]>, rows: Arc<[usize]>, probs: DenseMatrix },
    EdgeAttention { f: Var, g: Var, adj: Arc<SparseAdj>, slope: f64, raw: Vec<f64> },
    EdgeAggregate { adj: Arc<SparseAdj>, w: Var, m: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Spmm(..) => "spmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gate { .. } => "gate",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Dropout { .. } => "dropout",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowLogSoftmax(_) => "row_log_softmax",
            Op::RowSlice { .. } => "row_slice",
            Op::Sum(_) => "sum",
            Op::MaskedRowMean { .. } => "masked_row_mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::EdgeAttention { .. } => "edge_attention",
            Op::EdgeAggregate { .. } => "edge_aggregate",
        }
    }
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    edge_touches: u64,
    fault: Option<GradFault>,
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: GradFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of stored adjacency entries visited by propagation kernels
    /// during the forward pass.
    pub fn edge_touches(&self) -> u64 {
        self.edge_touches
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).as_scalar()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Result<Var, NumError> {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, NumError> {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; the usual way a weight stored as (out × in) is applied.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn spmm(&mut self, adj: &Arc<SparseAdj>, m: Var) -> Result<Var, NumError> {
        let out = spmm_with(adj, adj.edge_values(), self.value(m))?;
        self.edge_touches += adj.nnz() as u64;
        self.push(out, Op::Spmm(Arc::clone(adj), m))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.values_mut().iter_mut().zip(self.value(b).values()) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.values_mut().iter_mut().zip(self.value(b).values()) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Sums several same-shape values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, NumError> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| NumError::Argument("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Scales row `u` of `m` by `e[u, k]`.
    pub fn gate(&mut self, m: Var, e: Var, k: usize) -> Result<Var, NumError> {
        let (mv, ev) = (self.value(m), self.value(e));
        if mv.rows() != ev.rows() || k >= ev.cols() {
            return Err(shape_err(
                "gate",
                format!("operand {:?}, gate {:?}, branch {k}", mv.shape(), ev.shape()),
            ));
        }
        let mut out = mv.clone();
        for u in 0..out.rows() {
            let w = ev.get(u, k);
            for x in out.row_mut(u) {
                *x *= w;
            }
        }
        self.push(out, Op::Gate { m, e, k })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&slope) {
            return Err(NumError::Argument(format!("leaky slope {slope} outside [0, 1)")));
        }
        let out = self.value(a).map(|x| leaky(x, slope));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Inverted dropout: entries are zeroed with probability `p` and survivors
    /// scaled by `1/(1-p)`. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Argument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.values().len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let mut out = xv.clone();
        for (o, m) in out.values_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).row_softmax();
        self.push(out, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).row_log_softmax();
        self.push(out, Op::RowLogSoftmax(a))
    }

    /// Rows `start..start+len`.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(shape_err(
                "row_slice",
                format!("rows {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = xv.select_rows(&idx);
        self.push(out, Op::RowSlice { x, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let out = DenseMatrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean over the selected rows of each row's sum.
    pub fn masked_row_mean(&mut self, x: Var, rows: &Arc<[usize]>) -> Result<Var, NumError> {
        if rows.is_empty() {
            return Err(NumError::Argument("masked_row_mean over an empty row set".into()));
        }
        let xv = self.value(x);
        if let Some(&r) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(shape_err("masked_row_mean", format!("row {r} of {:?}", xv.shape())));
        }
        let total: f64 = rows.iter().map(|&r| xv.row(r).iter().sum::<f64>()).sum();
        let out = DenseMatrix::scalar(total / rows.len() as f64);
        self.push(
            out,
            Op::MaskedRowMean {
                x,
                rows: Arc::clone(rows),
            },
        )
    }

    /// Mean negative log-likelihood of `labels[r]` under `softmax(logits[r])`
    /// over the rows `r` in `rows`. `labels` is indexed by row.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &Arc<[usize]>,
        rows: &Arc<[usize]>,
    ) -> Result<Var, NumError> {
        if rows.is_empty() {
            return Err(NumError::Argument("cross_entropy over an empty mask".into()));
        }
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        let mut total = 0.0;
        for &r in rows.iter() {
            let y = *labels
                .get(r)
                .ok_or_else(|| shape_err("cross_entropy", format!("mask row {r} of {}", lv.rows())))?;
            if y >= lv.cols() {
                return Err(NumError::Argument(format!(
                    "label {y} outside [0, {})",
                    lv.cols()
                )));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let probs = lv.row_softmax();
        let out = DenseMatrix::scalar(total / rows.len() as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: Arc::clone(labels),
                rows: Arc::clone(rows),
                probs,
            },
        )
    }

    /// Neighborhood-softmax attention over the stored entries of `adj`.
    ///
    /// `f` and `g` are N×1 score halves; entry `(u, v)` gets the raw score
    /// `LeakyReLU(f[u] + g[v])`, normalized by softmax over row `u`. The
    /// result is an nnz×1 matrix aligned with the CSR entry order.
    pub fn edge_attention(
        &mut self,
        f: Var,
        g: Var,
        adj: &Arc<SparseAdj>,
        slope: f64,
    ) -> Result<Var, NumError> {
        let (fv, gv) = (self.value(f), self.value(g));
        let n = adj.n();
        if fv.shape() != (n, 1) || gv.shape() != (n, 1) {
            return Err(shape_err(
                "edge_attention",
                format!("scores {:?} and {:?} for {n} nodes", fv.shape(), gv.shape()),
            ));
        }
        let offsets = adj.row_offsets();
        let cols = adj.col_indices();
        let mut raw = vec![0.0; adj.nnz()];
        let mut weights = vec![0.0; adj.nnz()];
        for u in 0..n {
            let range = offsets[u]..offsets[u + 1];
            if range.is_empty() {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                raw[e] = fv.get(u, 0) + gv.get(cols[e], 0);
                max = max.max(leaky(raw[e], slope));
            }
            let mut total = 0.0;
            for e in range.clone() {
                weights[e] = (leaky(raw[e], slope) - max).exp();
                total += weights[e];
            }
            for w in &mut weights[range] {
                *w /= total;
            }
        }
        let out = DenseMatrix::from_vec(adj.nnz(), 1, weights)?;
        self.push(
            out,
            Op::EdgeAttention {
                f,
                g,
                adj: Arc::clone(adj),
                slope,
                raw,
            },
        )
    }

    /// `out[u] = Σ_(u,v) w_(u,v) · m[v]` with per-entry weights from the tape.
    pub fn edge_aggregate(&mut self, adj: &Arc<SparseAdj>, w: Var, m: Var) -> Result<Var, NumError> {
        let wv = self.value(w);
        if wv.shape() != (adj.nnz(), 1) {
            return Err(shape_err(
                "edge_aggregate",
                format!("weights {:?} for {} stored entries", wv.shape(), adj.nnz()),
            ));
        }
        let out = spmm_with(adj, wv.values(), self.value(m))?;
        self.edge_touches += adj.nnz() as u64;
        self.push(
            out,
            Op::EdgeAggregate {
                adj: Arc::clone(adj),
                w,
                m,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every parameter in
    /// `store`. Parameters that do not reach `root` get zeros.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Result<Grads, NumError> {
        if self.value(root).shape() != (1, 1) {
            return Err(NumError::Argument(format!(
                "backward from a non-scalar {:?} root",
                self.value(root).shape()
            )));
        }
        let mut params = Grads::zeros_like(store);
        let mut grads: Vec<Option<DenseMatrix>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(DenseMatrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = params.get_mut(*id);
                    if slot.shape() != g.shape() {
                        return Err(shape_err(
                            "backward",
                            format!("parameter {} changed shape", store.name(*id)),
                        ));
                    }
                    slot.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let mut db = g.t_matmul(self.value(*a))?;
                    if self.fault == Some(GradFault::MatMulTRight) {
                        db.scale_inplace(1.01);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Spmm(adj, m) => {
                    let dm = spmm_transpose_with(adj, adj.edge_values(), &g)?;
                    accumulate(&mut grads, *m, dm);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, y) in da.values_mut().iter_mut().zip(self.value(*b).values()) {
                        *d *= y;
                    }
                    let mut db = g;
                    for (d, x) in db.values_mut().iter_mut().zip(self.value(*a).values()) {
                        *d *= x;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Gate { m, e, k } => {
                    let (mv, ev) = (self.value(*m), self.value(*e));
                    let mut dm = g.clone();
                    let mut de = DenseMatrix::zeros(ev.rows(), ev.cols());
                    for u in 0..mv.rows() {
                        let w = ev.get(u, *k);
                        let dot: f64 = mv.row(u).iter().zip(g.row(u)).map(|(x, y)| x * y).sum();
                        de.set(u, *k, dot);
                        for x in dm.row_mut(u) {
                            *x *= w;
                        }
                    }
                    accumulate(&mut grads, *m, dm);
                    accumulate(&mut grads, *e, de);
                }
                Op::Relu(a) => {
                    let mut da = g;
                    for (d, x) in da.values_mut().iter_mut().zip(self.value(*a).values()) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut da = g;
                    for (d, x) in da.values_mut().iter_mut().zip(self.value(*a).values()) {
                        if *x <= 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.values_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(da.row(r)).map(|(p, d)| p * d).sum();
                        for (d, p) in da.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for r in 0..y.rows() {
                        let total: f64 = da.row(r).iter().sum();
                        for (d, ly) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d -= ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSlice { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let s = g.values()[0];
                    accumulate(&mut grads, *a, DenseMatrix::filled(av.rows(), av.cols(), s));
                }
                Op::MaskedRowMean { x, rows } => {
                    let xv = self.value(*x);
                    let c = g.values()[0] / rows.len() as f64;
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    for &r in rows.iter() {
                        for d in dx.row_mut(r) {
                            *d += c;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    rows,
                    probs,
                } => {
                    let c = g.values()[0] / rows.len() as f64;
                    let mut dl = DenseMatrix::zeros(probs.rows(), probs.cols());
                    for &r in rows.iter() {
                        for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d += c * p;
                        }
                        let y = labels[r];
                        dl.set(r, y, dl.get(r, y) - c);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::EdgeAttention {
                    f,
                    g: gs,
                    adj,
                    slope,
                    raw,
                } => {
                    let w = node.value.values();
                    let dw = g.values();
                    let offsets = adj.row_offsets();
                    let cols = adj.col_indices();
                    let mut df = DenseMatrix::zeros(adj.n(), 1);
                    let mut dg = DenseMatrix::zeros(adj.n(), 1);
                    for u in 0..adj.n() {
                        let range = offsets[u]..offsets[u + 1];
                        let dot: f64 = range.clone().map(|e| w[e] * dw[e]).sum();
                        for e in range {
                            let ds = w[e] * (dw[e] - dot);
                            let draw = if raw[e] > 0.0 { ds } else { ds * slope };
                            df.values_mut()[u] += draw;
                            dg.values_mut()[cols[e]] += draw;
                        }
                    }
                    accumulate(&mut grads, *f, df);
                    accumulate(&mut grads, *gs, dg);
                }
                Op::EdgeAggregate { adj, w, m } => {
                    let wv = self.value(*w);
                    let mv = self.value(*m);
                    let dm = spmm_transpose_with(adj, wv.values(), &g)?;
                    let cols = adj.col_indices();
                    let rows = adj.entry_rows();
                    let dw: Vec<f64> = (0..adj.nnz())
                        .map(|e| g.row(rows[e]).iter().zip(mv.row(cols[e])).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads, *m, dm);
                    accumulate(&mut grads, *w, DenseMatrix::from_vec(adj.nnz(), 1, dw)?);
                }
            }
        }
        Ok(params)
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, Stream};

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let scale = a
            .values()
            .iter()
            .chain(b.values())
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        a.max_abs_diff(b) / scale
    }

    /// Checks a closure building a scalar from parameters against finite differences.
    fn check<F>(store: &ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let grads = tape.backward(root, store).unwrap();
        let numeric = finite_diff_grad(
            |s| {
                let mut t = Tape::new();
                let r = build(&mut t, s);
                Ok::<_, NumError>(t.scalar(r).unwrap())
            },
            store,
            1e-5,
        )
        .unwrap();
        for id in store.ids() {
            let e = rel_err(grads.get(id), numeric.get(id));
            assert!(e <= tol, "{}: relative error {e}", store.name(id));
        }
    }

    fn rand_store(seed: u64, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = Rng::new(seed).fork(Stream::Init);
        let mut store = ParamStore::new();
        for &(name, r, c) in shapes {
            store.add(name, rng.gaussian_matrix(r, c, 1.0));
        }
        store
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64));
        let mut tape = Tape::new();
        let v = tape.param(&store, w).unwrap();
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(w), &DenseMatrix::filled(2, 3, 1.0));
    }

    #[test]
    fn unreached_param_gets_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", DenseMatrix::filled(2, 2, 1.0));
        let u = store.add("unused", DenseMatrix::filled(3, 1, 5.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, w).unwrap();
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(u), &DenseMatrix::zeros(3, 1));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let c = tape.constant(DenseMatrix::zeros(2, 1)).unwrap();
        assert!(matches!(tape.backward(c, &store), Err(NumError::Argument(_))));
    }

    #[test]
    fn non_finite_values_are_raised() {
        let mut tape = Tape::new();
        let c = tape.constant(DenseMatrix::filled(1, 1, 1e300)).unwrap();
        let err = tape.scale(c, 1e300).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { op: "scale" }));
    }

    #[test]
    fn squared_norm_of_product() {
        let store = rand_store(1, &[("w", 3, 4), ("x", 4, 2)]);
        check(
            &store,
            |t, s| {
                let w = t.param(s, ParamId(0)).unwrap();
                let x = t.param(s, ParamId(1)).unwrap();
                let y = t.matmul(w, x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn activations_and_softmaxes() {
        let store = rand_store(2, &[("a", 5, 3), ("b", 3, 3)]);
        check(
            &store,
            |t, s| {
                let a = t.param(s, ParamId(0)).unwrap();
                let b = t.param(s, ParamId(1)).unwrap();
                let h = t.matmul_t(a, b).unwrap();
                let r = t.relu(h).unwrap();
                let l = t.leaky_relu(h, 0.2).unwrap();
                let sm = t.row_softmax(l).unwrap();
                let lsm = t.row_log_softmax(r).unwrap();
                let p = t.mul(sm, lsm).unwrap();
                let q = t.sub(p, r).unwrap();
                let q = t.add_scalar(q, 0.3).unwrap();
                let q = t.scale(q, -1.7).unwrap();
                t.sum(q).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn relu_gradient_zero_below_kink() {
        let mut store = ParamStore::new();
        let w = store.add("w", DenseMatrix::from_rows(&[[-1.0, 2.0]]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, w).unwrap();
        let r = tape.relu(v).unwrap();
        assert_eq!(tape.value(r).values(), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s, &store).unwrap().get(w).values(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.param(&store, w).unwrap();
        let r = tape.leaky_relu(v, 0.2).unwrap();
        assert_eq!(tape.value(r).values(), &[-0.2, 2.0]);
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s, &store).unwrap().get(w).values(), &[0.2, 1.0]);
    }

    #[test]
    fn gate_slice_and_masked_mean() {
        let store = rand_store(3, &[("m", 4, 3), ("e", 4, 2), ("b", 6, 1)]);
        let rows: Arc<[usize]> = Arc::from(vec![0, 2, 3]);
        check(
            &store,
            move |t, s| {
                let m = t.param(s, ParamId(0)).unwrap();
                let e = t.param(s, ParamId(1)).unwrap();
                let b = t.param(s, ParamId(2)).unwrap();
                let g0 = t.gate(m, e, 0).unwrap();
                let g1 = t.gate(m, e, 1).unwrap();
                let hi = t.row_slice(b, 3, 3).unwrap();
                let lo = t.row_slice(b, 0, 3).unwrap();
                let p = t.matmul(g0, hi).unwrap();
                let q = t.matmul(g1, lo).unwrap();
                let pq = t.mul(p, q).unwrap();
                t.masked_row_mean(pq, &rows).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_and_dropout() {
        let store = rand_store(4, &[("logits", 5, 3)]);
        let labels: Arc<[usize]> = Arc::from(vec![0, 2, 1, 1, 0]);
        let rows: Arc<[usize]> = Arc::from(vec![0, 1, 3, 4]);
        check(
            &store,
            move |t, s| {
                let mut rng = Rng::new(9).fork(Stream::Dropout);
                let l = t.param(s, ParamId(0)).unwrap();
                let d = t.dropout(l, 0.3, &mut rng, true).unwrap();
                t.cross_entropy(d, &labels, &rows).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn spmm_and_attention() {
        let trips = vec![
            (0, 1, 0.5),
            (1, 0, 0.5),
            (1, 2, 0.3),
            (2, 1, 0.3),
            (0, 0, 1.0),
            (1, 1, 1.0),
            (2, 2, 1.0),
            (3, 3, 1.0),
            (2, 3, 0.7),
            (3, 2, 0.7),
        ];
        let adj = Arc::new(SparseAdj::from_triplets(4, trips).unwrap());
        let store = rand_store(5, &[("z", 4, 3), ("f", 4, 1), ("g", 4, 1)]);
        check(
            &store,
            move |t, s| {
                let z = t.param(s, ParamId(0)).unwrap();
                let f = t.param(s, ParamId(1)).unwrap();
                let g = t.param(s, ParamId(2)).unwrap();
                let w = t.edge_attention(f, g, &adj, 0.2).unwrap();
                let a = t.edge_aggregate(&adj, w, z).unwrap();
                let b = t.spmm(&adj, z).unwrap();
                let ab = t.mul(a, b).unwrap();
                t.sum(ab).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn attention_rows_normalize() {
        let trips = vec![(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0), (1, 1, 1.0), (2, 0, 1.0), (2, 2, 1.0)];
        let adj = Arc::new(SparseAdj::from_triplets(3, trips).unwrap());
        let mut tape = Tape::new();
        let f = tape
            .constant(DenseMatrix::from_rows(&[[0.3], [-1.0], [2.0]]).unwrap())
            .unwrap();
        let g = tape
            .constant(DenseMatrix::from_rows(&[[1.0], [0.5], [-0.4]]).unwrap())
            .unwrap();
        let w = tape.edge_attention(f, g, &adj, 0.2).unwrap();
        let w = tape.value(w).values();
        assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-12);
        assert!((w[3] - 1.0).abs() < 1e-12);
        assert!((w[4] + w[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_touches_counted() {
        let adj = Arc::new(SparseAdj::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::zeros(2, 2)).unwrap();
        tape.spmm(&adj, z).unwrap();
        tape.spmm(&adj, z).unwrap();
        assert_eq!(tape.edge_touches(), 4);
    }

    #[test]
    fn fault_injection_breaks_gradient() {
        let store = rand_store(6, &[("a", 3, 2), ("b", 2, 2)]);
        let build = |t: &mut Tape, s: &ParamStore| {
            let a = t.param(s, ParamId(0)).unwrap();
            let b = t.param(s, ParamId(1)).unwrap();
            let y = t.matmul_t(a, b).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y).unwrap()
        };
        let mut tape = Tape::new();
        tape.inject_fault(GradFault::MatMulTRight);
        let root = build(&mut tape, &store);
        let grads = tape.backward(root, &store).unwrap();
        let numeric = finite_diff_grad(
            |s| {
                let mut t = Tape::new();
                let r = build(&mut t, s);
                Ok::<_, NumError>(t.scalar(r).unwrap())
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(rel_err(grads.get(ParamId(1)), numeric.get(ParamId(1))) > 1e-3);
    }
}
