//! Recording tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node. Nodes that depend on
//! no trainable parameter are marked as not requiring gradients and are
//! skipped during the backward sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::matrix::{gemm, Matrix};
use crate::params::{ParamId, ParamStore, StoreId};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { store: StoreId, index: usize },
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`], keyed by store.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    per_store: HashMap<StoreId, Vec<(usize, Matrix)>>,
}

impl Gradients {
    pub(crate) fn for_store(&self, id: StoreId) -> Option<&Vec<(usize, Matrix)>> {
        self.per_store.get(&id)
    }

    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Matrix> {
        self.per_store
            .get(&store.id())?
            .iter()
            .find(|(i, _)| *i == id.0)
            .map(|(_, g)| g)
    }
}

/// Borrowed parameters plus whether they should receive gradients.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Params<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, tape: &mut Tape, id: ParamId) -> Var {
        if self.trainable {
            tape.param(self.store, id)
        } else {
            tape.frozen(self.store, id)
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    cache: HashMap<(StoreId, usize, bool), Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.cache.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter leaf. Repeated calls within one recording reuse
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_leaf(store, id, true)
    }

    /// The parameter's current value as a constant.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_leaf(store, id, false)
    }

    fn param_leaf(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let key = (store.id(), id.0, trainable);
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        let op = if trainable {
            Op::Param {
                store: store.id(),
                index: id.0,
            }
        } else {
            Op::Leaf
        };
        let v = self.push_shared(store.shared(id), op, trainable);
        self.cache.insert(key, v);
        v
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        if !self.rg(v) {
            return v;
        }
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Leaf, false)
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.rows(), "affine: input width {} vs weight rows {}", xv.cols(), wv.rows());
        assert_eq!(bv.shape(), (1, wv.cols()), "affine: bias shape");
        let mut data = Vec::with_capacity(xv.rows() * wv.cols());
        for _ in 0..xv.rows() {
            data.extend_from_slice(bv.data());
        }
        let mut out = Matrix::from_vec(xv.rows(), wv.cols(), data);
        gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Affine { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every column of `a` by the `rows x 1` column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; saturated entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hcat(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).columns(start, end);
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, start, end), rg)
    }

    /// Sum of each row, as a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::scalar(av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Picks column `cols[r]` from each row `r`, producing a column.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(cols.len(), av.rows(), "gather index count");
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let out = Matrix::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::Gather(a, cols.to_vec()), rg)
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    ///
    /// Returns the gradient of `loss` with respect to every trainable
    /// parameter leaf it reaches. A tape can be swept once; call
    /// [`Tape::reset`] before recording the next computation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(DiffError::BackwardTwice);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, contrib: Matrix| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(slot) => slot.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param { store, index } => {
                    out.per_store.entry(*store).or_default().push((*index, g));
                }
                Op::Affine { x, w, b } => {
                    if needs(*x) {
                        let mut dx = Matrix::zeros(g.rows(), val(*w).rows());
                        gemm(1.0, &g, false, val(*w), true, 0.0, &mut dx);
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        let wv = val(*w);
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        gemm(1.0, val(*x), true, &g, false, 0.0, &mut dw);
                        acc(*w, dw);
                    }
                    if needs(*b) {
                        acc(*b, g.column_sums());
                    }
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        let mut da = Matrix::zeros(g.rows(), val(*b).rows());
                        gemm(1.0, &g, false, val(*b), true, 0.0, &mut da);
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let bv = val(*b);
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(1.0, val(*a), true, &g, false, 0.0, &mut db);
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(val(*b), |d, y| d * y));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(val(*a), |d, x| d * x));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(*row) {
                        acc(*row, g.column_sums());
                    }
                    acc(*a, g);
                }
                Op::MulCol(a, col) => {
                    let cv = val(*col);
                    if needs(*col) {
                        let av = val(*a);
                        let data = (0..g.rows())
                            .map(|r| g.row(r).iter().zip(av.row(r)).map(|(d, x)| d * x).sum())
                            .collect();
                        acc(*col, Matrix::from_vec(g.rows(), 1, data));
                    }
                    if needs(*a) {
                        let mut da = g;
                        for r in 0..da.rows() {
                            let s = cv.data()[r];
                            da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                        }
                        acc(*a, da);
                    }
                }
                Op::ScaleBy(a, s) => {
                    let k = val(*s).item();
                    if needs(*s) {
                        let d: f64 = g.data().iter().zip(val(*a).data()).map(|(d, x)| d * x).sum();
                        acc(*s, Matrix::scalar(d));
                    }
                    acc(*a, g.map(|d| d * k));
                }
                Op::Scale(a, k) => acc(*a, g.map(|d| d * k)),
                Op::Offset(a) => acc(*a, g),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
                Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |d, x| d * sigmoid(x))),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(val(*a), |d, x| if x > lo && x < hi { d } else { 0.0 }))
                }
                Op::Min(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let mut da = g.clone();
                        for ((d, x), y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x > y {
                                *d = 0.0;
                            }
                        }
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let mut db = g;
                        for ((d, x), y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x <= y {
                                *d = 0.0;
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            acc(p, g.columns(start, start + w));
                        }
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let av = val(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        da.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    acc(*a, da);
                }
                Op::RowSum(a) => {
                    let av = val(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let d = g.data()[r];
                        da.row_mut(r).iter_mut().for_each(|x| *x = d);
                    }
                    acc(*a, da);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::Gather(a, cols) => {
                    let (r, c) = val(*a).shape();
                    let mut da = Matrix::zeros(r, c);
                    for (row, &col) in cols.iter().enumerate() {
                        da.set(row, col, g.data()[row]);
                    }
                    acc(*a, da);
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
