//! Tape-based reverse-mode differentiation over 2-D values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes are appended in evaluation order, so the tape is already in
//! topological order and [`Graph::backward`] walks it from the loss back to
//! the leaves. Parameters are read in place from a borrowed [`ParamStore`];
//! their gradients are returned in a [`Gradients`] value and folded into the
//! store with [`ParamStore::accumulate`].

use alloc::vec;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<T>),
    Scale(usize, T),
    Sigmoid(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm { x: usize, gain: usize, eps: T },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, smooth: T, pad: usize, probs: Vec<T>, count: usize },
    KlDiv { p: usize, q: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    /// Empty for parameter nodes, whose value lives in the store.
    data: Vec<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<'p, T> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Vec<T>>,
    params: Vec<Option<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a parameter, if it was reached.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .map(|n| self.nodes[n].as_slice())
            .filter(|g| !g.is_empty())
    }

    /// Gradient with respect to any recorded node that required one.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).map(Vec::as_slice).filter(|g| !g.is_empty())
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dinner = c * (one + T::of(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if mx == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / s);
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize, data: Vec<T>, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || data.len() == rows * cols);
        self.nodes.push(Node { op, rows, cols, data, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn data_of(&self, v: usize) -> &[T] {
        let n = &self.nodes[v];
        match n.op {
            Op::Param(id) => self.store.get(id).data(),
            _ => &n.data,
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.data_of(v.0)
    }

    /// `(rows, cols)` of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let (r, c) = t.dims2();
        self.push(Op::Leaf, r, c, t.data().to_vec(), false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(shape_err!("constant", "{}x{} from {} values", rows, cols, data.len()));
        }
        Ok(self.push(Op::Leaf, rows, cols, data, false))
    }

    /// Records an input leaf; when `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(Op::Leaf, r, c, t.data().to_vec(), requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (r, c) = self.store.get(id).dims2();
        self.push(Op::Param(id), r, c, Vec::new(), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul", "[{}x{}] · [{}x{}]", m, k, k2, n));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MatMul(a.0, b.0), m, n, out, g))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt", "[{}x{}] · [{}x{}]ᵀ", m, k, n, k2));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MatMulNt(a.0, b.0), m, n, out, g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let g = self.needs(a.0);
        self.push(Op::Transpose(a.0), n, m, out, g)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err!(op, "{:?} vs {:?}", da, db));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Add(a.0, b.0), r, c, out, g))
    }

    /// Adds a `[1×c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(shape_err!("add_row", "[{}x{}] + {:?}", r, c, self.dims(row)));
        }
        let bias = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(bias).map(|(&v, &b)| v + b)).collect();
        let g = self.needs(a.0) || self.needs(row.0);
        Ok(self.push(Op::AddRow(a.0, row.0), r, c, out, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Mul(a.0, b.0), r, c, out, g))
    }

    /// Elementwise product with a constant of the same shape (masking, dropout).
    pub fn mul_const(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if k.len() != r * c {
            return Err(shape_err!("mul_const", "[{}x{}] ⊙ {} values", r, c, k.len()));
        }
        let out = self.value(a).iter().zip(&k).map(|(&x, &y)| x * y).collect();
        let g = self.needs(a.0);
        Ok(self.push(Op::MulConst(a.0, k), r, c, out, g))
    }

    /// Multiplies every row `i` of `a` by `keep[i]`.
    pub fn scale_rows(&mut self, a: Var, keep: &[T]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if keep.len() != r {
            return Err(shape_err!("scale_rows", "{} rows, {} factors", r, keep.len()));
        }
        let k = keep.iter().flat_map(|&s| core::iter::repeat_n(s, c)).collect();
        self.mul_const(a, k)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let g = self.needs(a.0);
        self.push(Op::Scale(a.0, s), r, c, out, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let one = T::one();
        let out = self.value(a).iter().map(|&x| one / (one + (-x).exp())).collect();
        let g = self.needs(a.0);
        self.push(Op::Sigmoid(a.0), r, c, out, g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let g = self.needs(a.0);
        self.push(Op::Gelu(a.0), r, c, out, g)
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Row-wise softmax. Positions where `allowed` is false get probability
    /// exactly zero; a row with no allowed position is all zeros.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let (r, c) = self.dims(a);
        if let Some(m) = allowed {
            if m.len() != r * c {
                return Err(shape_err!("softmax", "mask of {} for [{}x{}]", m.len(), r, c));
            }
        }
        let src = self.value(a);
        let mut out = vec![T::zero(); r * c];
        let mut buf = vec![T::zero(); c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            match allowed {
                None => softmax_row(row, &mut out[i * c..(i + 1) * c]),
                Some(m) => {
                    let mrow = &m[i * c..(i + 1) * c];
                    for j in 0..c {
                        buf[j] = if mrow[j] { row[j] } else { T::neg_infinity() };
                    }
                    softmax_row(&buf, &mut out[i * c..(i + 1) * c]);
                }
            }
        }
        let g = self.needs(a.0);
        Ok(self.push(Op::Softmax(a.0), r, c, out, g))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).fold(T::zero(), |s, v| s + v).ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let g = self.needs(a.0);
        Ok(self.push(Op::LogSoftmax(a.0), r, c, out, g))
    }

    /// Row-wise RMS normalization with a learned `[1×c]` gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(gain) != (1, c) {
            return Err(shape_err!("rms_norm", "gain {:?} for width {}", self.dims(gain), c));
        }
        let eps = T::of(1e-6);
        let gv = self.value(gain);
        let mut out = vec![T::zero(); r * c];
        for (row, orow) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / T::of(c as f64);
            let inv = T::one() / (ms + eps).sqrt();
            for j in 0..c {
                orow[j] = row[j] * inv * gv[j];
            }
        }
        let g = self.needs(a.0) || self.needs(gain.0);
        Ok(self.push(Op::RmsNorm { x: a.0, gain: gain.0, eps }, r, c, out, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| invalid!("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(shape_err!("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let g = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), r, c, out, g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols", "[{}..{}) of width {}", start, start + len, c));
        }
        let out = self.value(a).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let g = self.needs(a.0);
        Ok(self.push(Op::SliceCols { x: a.0, start }, r, len, out, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| invalid!("concat_rows of nothing"))?;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(shape_err!("concat_rows", "column counts differ"));
        }
        let r: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let g = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), r, c, out, g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows", "[{}..{}) of {} rows", start, start + len, r));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let g = self.needs(a.0);
        Ok(self.push(Op::SliceRows { x: a.0, start }, len, c, out, g))
    }

    /// Row lookup `table[ids[i]]`; also used to pick arbitrary rows of a node.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(invalid!("gather_rows with no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(invalid!("row index {} out of range for {} rows", bad, r));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let g = self.needs(table.0);
        Ok(self.push(Op::Gather { table: table.0, ids: ids.to_vec() }, ids.len(), c, out, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |s, &v| s + v);
        let g = self.needs(a.0);
        self.push(Op::Sum(a.0), 1, 1, vec![s], g)
    }

    /// Mean label-smoothed negative log-likelihood over rows whose target is
    /// not `pad`. The smoothed target is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T, pad: usize) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(shape_err!("cross_entropy", "{} targets for {} rows", targets.len(), t));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(invalid!("label smoothing must lie in [0, 1), got {:?}", smoothing));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(invalid!("target id {} not below vocabulary size {}", bad, v));
        }
        self.check_finite("cross_entropy", logits)?;
        let count = targets.iter().filter(|&&y| y != pad).count();
        if count == 0 {
            return Err(invalid!("cross_entropy: every position is padding"));
        }
        let off = smoothing / T::of(v as f64);
        let on = T::one() - smoothing + off;
        let src = self.value(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for (i, &y) in targets.iter().enumerate() {
            if y == pad {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).fold(T::zero(), |s, e| s + e).ln();
            let mut sum_logp = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let lp = x - lse;
                probs[i * v + j] = lp.exp();
                sum_logp += lp;
            }
            let lp_y = row[y] - lse;
            // −Σ t̃ log p with t̃ = off everywhere plus (on − off) at y
            total += -(off * sum_logp + (on - off) * lp_y);
        }
        let loss = total / T::of(count as f64);
        let g = self.needs(logits.0);
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), smooth: smoothing, pad, probs, count };
        Ok(self.push(op, 1, 1, vec![loss], g))
    }

    /// `Σ_rows Σ_c q·(ln q − ln max(p, 1e-9))` with `0·ln 0 = 0`. Both inputs
    /// must be distributions along the last axis.
    pub fn kl_divergence(&mut self, q: &Tensor<T>, p: Var) -> Result<Var> {
        let (r, c) = self.dims(p);
        if q.dims2() != (r, c) {
            return Err(shape_err!("kl_divergence", "q {:?} vs p [{}x{}]", q.dims2(), r, c));
        }
        let tol = T::of(1e-5);
        for (name, data) in [("q", q.data()), ("p", self.value(p))] {
            for row in data.chunks(c) {
                let s = row.iter().fold(T::zero(), |s, &x| s + x);
                if row.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) || (s - T::one()).abs() > tol {
                    return Err(invalid!("kl_divergence: {} row is not a distribution (sum {:?})", name, s));
                }
            }
        }
        let floor = T::of(1e-9);
        let mut total = T::zero();
        for (&qv, &pv) in q.data().iter().zip(self.value(p)) {
            if qv > T::zero() {
                total += qv * (qv.ln() - pv.max(floor).ln());
            }
        }
        let g = self.needs(p.0);
        Ok(self.push(Op::KlDiv { p: p.0, q: q.data().to_vec() }, 1, 1, vec![total], g))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.dims(loss) != (1, 1) {
            return Err(invalid!("backward needs a scalar loss, got {:?}", self.dims(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<T>> = (0..n).map(|_| Vec::new()).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = vec![T::one()];
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let gout = core::mem::take(&mut grads[i]);
            self.propagate(i, &gout, &mut grads);
            grads[i] = gout;
        }
        let mut params = vec![None; self.store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if grads[i].is_empty() {
                    continue;
                }
                match params[id.0] {
                    // the same parameter recorded twice: fold into the first node
                    Some(first) => {
                        let g = core::mem::take(&mut grads[i]);
                        let acc: &mut Vec<T> = &mut grads[first];
                        acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                    None => params[id.0] = Some(i),
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accum(&self, grads: &mut [Vec<T>], target: usize) -> Option<usize> {
        if !self.nodes[target].needs_grad {
            return None;
        }
        if grads[target].is_empty() {
            let node = &self.nodes[target];
            grads[target] = vec![T::zero(); node.rows * node.cols];
        }
        Some(target)
    }

    fn propagate(&self, i: usize, gout: &[T], grads: &mut [Vec<T>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = cols;
                if let Some(a) = self.accum(grads, a) {
                    // dA = dC · Bᵀ
                    let bv = self.data_of(b);
                    matmul_nt_into(gout, bv, &mut grads[a], m, n, k);
                }
                if let Some(b) = self.accum(grads, b) {
                    // dB = Aᵀ · dC
                    let av = self.data_of(a);
                    matmul_tn_into(av, gout, &mut grads[b], m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = cols;
                if let Some(a) = self.accum(grads, a) {
                    // dA = dC · B
                    let bv = self.data_of(b);
                    matmul_into(gout, bv, &mut grads[a], m, n, k);
                }
                if let Some(b) = self.accum(grads, b) {
                    // dB = dCᵀ · A
                    let av = self.data_of(a);
                    matmul_tn_into(gout, av, &mut grads[b], m, n, k);
                }
            }
            &Op::Transpose(a) => {
                if let Some(a) = self.accum(grads, a) {
                    // node is [rows×cols], source is [cols×rows]
                    for r in 0..rows {
                        for c in 0..cols {
                            grads[a][c * rows + r] += gout[r * cols + c];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if let Some(x) = self.accum(grads, x) {
                        grads[x].iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if let Some(a) = self.accum(grads, a) {
                    grads[a].iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
                if let Some(b) = self.accum(grads, b) {
                    for row in gout.chunks(cols) {
                        grads[b].iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.accum(grads, a) {
                    let bv = self.data_of(b);
                    for ((g, &d), &y) in grads[ga].iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = self.accum(grads, b) {
                    let av = self.data_of(a);
                    for ((g, &d), &x) in grads[gb].iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::MulConst(a, k) => {
                if let Some(a) = self.accum(grads, *a) {
                    for ((g, &d), &s) in grads[a].iter_mut().zip(gout).zip(k) {
                        *g += d * s;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(a) = self.accum(grads, a) {
                    grads[a].iter_mut().zip(gout).for_each(|(g, &d)| *g += d * s);
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(a) = self.accum(grads, a) {
                    for ((g, &d), &y) in grads[a].iter_mut().zip(gout).zip(&node.data) {
                        *g += d * y * (T::one() - y);
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = self.accum(grads, a) {
                    let xs = self.data_of(a);
                    for ((g, &d), &x) in grads[ga].iter_mut().zip(gout).zip(xs) {
                        *g += d * gelu(x).1;
                    }
                }
            }
            &Op::Softmax(a) => {
                if let Some(a) = self.accum(grads, a) {
                    for r in 0..rows {
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let d = &gout[r * cols..(r + 1) * cols];
                        let dot = y.iter().zip(d).fold(T::zero(), |s, (&y, &d)| s + y * d);
                        let g = &mut grads[a][r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(a) = self.accum(grads, a) {
                    for r in 0..rows {
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let d = &gout[r * cols..(r + 1) * cols];
                        let sd = d.iter().fold(T::zero(), |s, &v| s + v);
                        let g = &mut grads[a][r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            g[j] += d[j] - y[j].exp() * sd;
                        }
                    }
                }
            }
            &Op::RmsNorm { x, gain, eps } => {
                let xs = self.data_of(x);
                let gv = self.data_of(gain);
                let ct = T::of(cols as f64);
                let gx = self.accum(grads, x);
                let gg = self.accum(grads, gain);
                for r in 0..rows {
                    let row = &xs[r * cols..(r + 1) * cols];
                    let d = &gout[r * cols..(r + 1) * cols];
                    let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / ct;
                    let inv = T::one() / (ms + eps).sqrt();
                    if let Some(gg) = gg {
                        for j in 0..cols {
                            grads[gg][j] += d[j] * row[j] * inv;
                        }
                    }
                    if let Some(gx) = gx {
                        // dx = inv·(d⊙g − x̂·mean(d⊙g⊙x̂))
                        let dot = (0..cols).fold(T::zero(), |s, j| s + d[j] * gv[j] * row[j] * inv) / ct;
                        let g = &mut grads[gx][r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            g[j] += inv * (d[j] * gv[j] - row[j] * inv * dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if let Some(p) = self.accum(grads, p) {
                        for r in 0..rows {
                            let src = &gout[r * cols + off..r * cols + off + pc];
                            grads[p][r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    off += pc;
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = self.nodes[x].cols;
                if let Some(x) = self.accum(grads, x) {
                    for r in 0..rows {
                        let dst = &mut grads[x][r * xc + start..r * xc + start + cols];
                        dst.iter_mut().zip(&gout[r * cols..(r + 1) * cols]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].rows * cols;
                    if let Some(p) = self.accum(grads, p) {
                        grads[p].iter_mut().zip(&gout[off..off + len]).for_each(|(g, &d)| *g += d);
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(x) = self.accum(grads, x) {
                    let dst = &mut grads[x][start * cols..(start + rows) * cols];
                    dst.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Gather { table, ids } => {
                if let Some(t) = self.accum(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut grads[t][id * cols..(id + 1) * cols];
                        dst.iter_mut().zip(&gout[r * cols..(r + 1) * cols]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(a) = self.accum(grads, a) {
                    let d = gout[0];
                    grads[a].iter_mut().for_each(|g| *g += d);
                }
            }
            Op::CrossEntropy { logits, targets, smooth, pad, probs, count } => {
                let v = self.nodes[*logits].cols;
                if let Some(l) = self.accum(grads, *logits) {
                    let off = *smooth / T::of(v as f64);
                    let on = T::one() - *smooth + off;
                    let scale = gout[0] / T::of(*count as f64);
                    for (r, &y) in targets.iter().enumerate() {
                        if y == *pad {
                            continue;
                        }
                        let g = &mut grads[l][r * v..(r + 1) * v];
                        for j in 0..v {
                            let t = if j == y { on } else { off };
                            g[j] += scale * (probs[r * v + j] - t);
                        }
                    }
                }
            }
            Op::KlDiv { p, q } => {
                if let Some(gp) = self.accum(grads, *p) {
                    let floor = T::of(1e-9);
                    let pv = self.data_of(*p);
                    for ((g, &qv), &pv) in grads[gp].iter_mut().zip(q).zip(pv) {
                        if qv > T::zero() && pv > floor {
                            *g += -gout[0] * qv / pv;
                        }
                    }
                }
            }
        }
    }
}
