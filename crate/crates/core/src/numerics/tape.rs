//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! [`Gradients`], which can then be added into the [`ParamStore`]s whose
//! parameters were placed on the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::tensor::{log_softmax_row, matmul_nt, matmul_raw, matmul_tn, softmax_row};
use crate::numerics::{ParamId, ParamStore, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param { store: u64, id: ParamId },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    LogSigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    CenterRows(usize),
    Gather(usize, Vec<usize>),
    Embed(usize, Vec<usize>),
    Concat(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast mode of a binary elementwise op.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Rows,
}

impl Tape {
    pub fn new() -> Self {
        Self {
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

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Value held by `v`.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable belongs to another tape");
        &self.nodes[i].value
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Places a parameter on the tape; its gradient can later be routed back to `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param { store: store.id(), id }, "param")
    }

    fn bcast(&self, op: &'static str, a: usize, b: usize) -> Result<Bcast> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            Ok(Bcast::Rows)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.bcast(name, ia, ib)?;
        let bv = self.val(ib);
        let n = bv.len();
        let mut out = self.val(ia).clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, bv.data()[k % n]);
        }
        self.push(out, op(ia, ib), name)
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Matrix product of a `(m,k)` and a `(k,n)` tensor.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(f);
        self.push(out, op(ia), name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x * c);
        self.push(out, Op::Scale(ia, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    /// `ln(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut out = self.val(ia).clone();
        let c = out.cols();
        out.data_mut().chunks_mut(c).for_each(softmax_row);
        self.push(out, Op::Softmax(ia), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut out = self.val(ia).clone();
        let c = out.cols();
        out.data_mut().chunks_mut(c).for_each(log_softmax_row);
        self.push(out, Op::LogSoftmax(ia), "log_softmax")
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.val(ia).sum());
        self.push(out, Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(ia), "mean")
    }

    /// Sums the last axis: `(r, c) -> (r,)`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia);
        let sums = v.data().chunks(v.cols()).map(|r| r.iter().sum()).collect();
        self.push(Tensor::vector(sums), Op::SumRows(ia), "sum_rows")
    }

    /// Subtracts each row's mean from its entries.
    /// Rows equal to a constant centre to exact zeros.
    pub fn center_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut out = self.val(ia).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            centre(row);
        }
        self.push(out, Op::CenterRows(ia), "center_rows")
    }

    /// Picks `a[r, cols[r]]` from each row: `(r, c) -> (r,)`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia);
        let c = v.cols();
        if cols.len() != v.rows() || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let out = cols.iter().enumerate().map(|(r, &j)| v.data()[r * c + j]).collect();
        self.push(Tensor::vector(out), Op::Gather(ia, cols.to_vec()), "gather")
    }

    /// Row lookup in a `(n, e)` table: returns `(rows.len(), e)`.
    pub fn embed(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = self.val(it);
        if t.rank() != 2 || rows.is_empty() {
            return Err(Error::Shape {
                op: "embed",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let (n, e) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::TokenOutOfRange { token: bad, size: n });
        }
        let mut data = Vec::with_capacity(rows.len() * e);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), e], data)?;
        self.push(out, Op::Embed(it, rows.to_vec()), "embed")
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "concat",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::new(vec![r, ca + cb], data)?;
        self.push(out, Op::Concat(ia, ib), "concat")
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        if self.val(r).len() != 1 {
            return Err(Error::NonScalarRoot(self.val(r).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; r + 1];
        grads[r] = Some(Tensor::full(self.val(r).shape(), 1.0));

        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Constant | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Param { .. } => unreachable!(),
                Op::Add(a, b) => {
                    let mode = self.bcast("add", *a, *b)?;
                    push_grad(&mut grads, *b, reduce_bcast(&g, mode));
                    push_grad(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mode = self.bcast("sub", *a, *b)?;
                    let mut gb = reduce_bcast(&g, mode);
                    gb.scale_inplace(-1.0);
                    push_grad(&mut grads, *b, gb);
                    push_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let mode = self.bcast("mul", *a, *b)?;
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let n = bv.len();
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= bv.data()[k % n];
                    }
                    let mut gfull = g;
                    for (v, x) in gfull.data_mut().iter_mut().zip(av.data()) {
                        *v *= x;
                    }
                    push_grad(&mut grads, *b, reduce_bcast(&gfull, mode));
                    push_grad(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                    let gb = matmul_tn(av.data(), g.data(), m, k, n);
                    push_grad(&mut grads, *a, Tensor::new(vec![m, k], ga)?);
                    push_grad(&mut grads, *b, Tensor::new(vec![k, n], gb)?);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.scale_inplace(*c);
                    push_grad(&mut grads, *a, ga);
                }
                Op::AddScalar(a) => push_grad(&mut grads, *a, g),
                Op::Sigmoid(a) => push_grad(&mut grads, *a, zip_map(&g, y, |g, s| g * s * (1.0 - s))),
                Op::Tanh(a) => push_grad(&mut grads, *a, zip_map(&g, y, |g, t| g * (1.0 - t * t))),
                Op::Exp(a) => push_grad(&mut grads, *a, zip_map(&g, y, |g, e| g * e)),
                Op::Log(a) => push_grad(&mut grads, *a, zip_map(&g, self.val(*a), |g, x| g / x)),
                Op::LogSigmoid(a) => push_grad(&mut grads, *a, zip_map(&g, self.val(*a), |g, x| g * sigmoid(-x))),
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut ga = g;
                    for (gr, yr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    push_grad(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let c = y.cols();
                    let mut ga = g;
                    for (gr, yr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    push_grad(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.val(*a).shape(), g.item());
                    push_grad(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let av = self.val(*a);
                    let ga = Tensor::full(av.shape(), g.item() / av.len() as f64);
                    push_grad(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let av = self.val(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (row, gv) in ga.data_mut().chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|v| *v = *gv);
                    }
                    push_grad(&mut grads, *a, ga);
                }
                Op::CenterRows(a) => {
                    let c = y.cols();
                    let mut ga = g;
                    for row in ga.data_mut().chunks_mut(c) {
                        let m = row.iter().sum::<f64>() / c as f64;
                        row.iter_mut().for_each(|v| *v -= m);
                    }
                    push_grad(&mut grads, *a, ga);
                }
                Op::Gather(a, cols) => {
                    let av = self.val(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (r, (&j, gv)) in cols.iter().zip(g.data()).enumerate() {
                        ga.data_mut()[r * c + j] += gv;
                    }
                    push_grad(&mut grads, *a, ga);
                }
                Op::Embed(t, rows) => {
                    let tv = self.val(*t);
                    let e = tv.shape()[1];
                    let mut gt = Tensor::zeros(tv.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g.data()[k * e..(k + 1) * e];
                        for (d, s) in gt.data_mut()[r * e..(r + 1) * e].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    push_grad(&mut grads, *t, gt);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.val(*a).cols(), self.val(*b).cols());
                    let rows = g.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for row in g.data().chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    push_grad(&mut grads, *a, Tensor::new(vec![rows, ca], da)?);
                    push_grad(&mut grads, *b, Tensor::new(vec![rows, cb], db)?);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param { store, id } => Some((i, store, id)),
                    _ => None,
                })
                .collect(),
        })
    }
}

fn push_grad(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape mismatch"),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, mode: Bcast) -> Tensor {
    match mode {
        Bcast::Same => g.clone(),
        Bcast::Rows => {
            let c = g.cols();
            let mut out = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
    }
}

fn zip_map(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = g.clone();
    for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
        *o = f(*o, *v);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, u64, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf (constant or parameter) node.
    ///
    /// Interior gradients are released during the reverse pass.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Adds the gradients of every parameter of `store` found on the tape into its buffers.
    ///
    /// Parameters that are on the tape but unreachable from the root receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, sid, pid) in &self.params {
            if sid != store.id() {
                continue;
            }
            match self.grads.get(node).and_then(Option::as_ref) {
                Some(g) => store.accumulate_grad(pid, g)?,
                None => {
                    let zeros = Tensor::zeros(store.value(pid).shape());
                    store.accumulate_grad(pid, &zeros)?
                }
            }
        }
        Ok(())
    }
}

/// Subtracts the mean in place, shifting by the first entry first so that a
/// constant slice becomes exactly zero.
pub(crate) fn centre(row: &mut [f64]) {
    let Some(&first) = row.first() else { return };
    row.iter_mut().for_each(|v| *v -= first);
    let m = row.iter().sum::<f64>() / row.len() as f64;
    row.iter_mut().for_each(|v| *v -= m);
}
