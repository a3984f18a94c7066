//! Dense-tensor substrate with reverse-mode automatic differentiation.
//!
//! Operations record themselves on a [`Tape`]; [`Tensor::backward`] replays
//! the tape in reverse and accumulates gradients into every ancestor that
//! was created with [`Tape::var`]. Tensors are 2-D row-major matrices;
//! scalars are 1x1.
//!
//! A tape and all tensors on it belong to one unit of execution at a time.
//! Distinct tapes are independent and may live on different threads.

pub mod check;


use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{c, Scalar};

mod kernels;
use kernels::{mm, mm_nt, mm_tn};

enum Op<F: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    /// c = a * b^T
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    /// Broadcast-add a 1xN row to every row of a.
    AddRow { a: usize, row: usize },
    Scale { a: usize, k: F },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<F>, inv_std: Vec<F> },
    GatherRows { src: usize, ids: Vec<usize> },
    /// Row t of the output is column ids[t] of src (transpose-view lookup).
    EmbedCols { src: usize, ids: Vec<usize> },
    GatherElems { src: usize, idx: Vec<(usize, usize)> },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { a: usize },
    /// Elementwise log(exp(a) + exp(b)), -inf safe.
    Lse2 { a: usize, b: usize },
    /// Shift every row right by `by`, filling with -inf.
    ShiftCols { a: usize, by: usize },
}

struct Node<F: Scalar> {
    rows: usize,
    cols: usize,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

struct TapeInner<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

pub struct Tape<F: Scalar> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

/// Handle to a tensor recorded on a tape.
pub struct Tensor<F: Scalar> {
    tape: Tape<F>,
    id: usize,
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Tensor({r}x{c}, id {})", self.id)
    }
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), id: self.id }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<F>, requires_grad: bool, op: Op<F>) -> Tensor<F> {
        debug_assert_eq!(rows * cols, values.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, values, grad: None, requires_grad, op });
        Tensor { tape: self.clone(), id }
    }

    /// Tensor that never receives a gradient buffer.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<F>) -> Tensor<F> {
        self.push(rows, cols, values, false, Op::Leaf)
    }

    /// Gradient-requiring leaf (a parameter or checked input).
    pub fn var(&self, rows: usize, cols: usize, values: Vec<F>) -> Tensor<F> {
        self.push(rows, cols, values, true, Op::Leaf)
    }

    pub fn scalar(&self, v: F) -> Tensor<F> {
        self.constant(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all records and re-arm the tape.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].rows
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        (n.rows, n.cols)
    }

    pub fn value(&self) -> Vec<F> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn item(&self) -> F {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        debug_assert_eq!(n.values.len(), 1);
        n.values[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    fn rg2(&self, other: &Tensor<F>) -> bool {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad
    }

    fn rg(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Constant copy of this tensor's current values (gradient-detached).
    pub fn detach(&self) -> Tensor<F> {
        let (r, co) = self.shape();
        self.tape.constant(r, co, self.value())
    }

    pub fn matmul(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (ar, ac) = self.shape();
        let (br, bc) = b.shape();
        if ac != br {
            return Err(Error::Dim { op: "matmul", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            mm(&inner.nodes[self.id].values, ar, ac, &inner.nodes[b.id].values, bc)
        };
        Ok(self.tape.push(ar, bc, out, self.rg2(b), Op::Matmul { a: self.id, b: b.id }))
    }

    /// self * b^T.
    pub fn matmul_nt(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (ar, ac) = self.shape();
        let (br, bc) = b.shape();
        if ac != bc {
            return Err(Error::Dim { op: "matmul_nt", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            mm_nt(&inner.nodes[self.id].values, ar, ac, &inner.nodes[b.id].values, br)
        };
        Ok(self.tape.push(ar, br, out, self.rg2(b), Op::MatmulNT { a: self.id, b: b.id }))
    }

    fn zip_shape(&self, b: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape();
        let (br, bc) = b.shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::Dim { op, lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        Ok((ar, ac))
    }

    pub fn add(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, co) = self.zip_shape(b, "add")?;
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id]
                .values
                .iter()
                .zip(&inner.nodes[b.id].values)
                .map(|(&x, &y)| x + y)
                .collect()
        };
        Ok(self.tape.push(r, co, out, self.rg2(b), Op::Add { a: self.id, b: b.id }))
    }

    pub fn sub(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, co) = self.zip_shape(b, "sub")?;
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id]
                .values
                .iter()
                .zip(&inner.nodes[b.id].values)
                .map(|(&x, &y)| x - y)
                .collect()
        };
        Ok(self.tape.push(r, co, out, self.rg2(b), Op::Sub { a: self.id, b: b.id }))
    }

    pub fn mul_elem(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, co) = self.zip_shape(b, "mul_elem")?;
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id]
                .values
                .iter()
                .zip(&inner.nodes[b.id].values)
                .map(|(&x, &y)| x * y)
                .collect()
        };
        Ok(self.tape.push(r, co, out, self.rg2(b), Op::MulElem { a: self.id, b: b.id }))
    }

    /// Broadcast-add a 1xN row vector to every row.
    pub fn add_row(&self, row: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, co) = self.shape();
        let (rr, rc) = row.shape();
        if rr != 1 || rc != co {
            return Err(Error::Dim { op: "add_row", lhs: vec![r, co], rhs: vec![rr, rc] });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].values;
            let rv = &inner.nodes[row.id].values;
            let mut o = Vec::with_capacity(a.len());
            for i in 0..r {
                for j in 0..co {
                    o.push(a[i * co + j] + rv[j]);
                }
            }
            o
        };
        Ok(self.tape.push(r, co, out, self.rg2(row), Op::AddRow { a: self.id, row: row.id }))
    }

    pub fn scale(&self, k: F) -> Tensor<F> {
        let (r, co) = self.shape();
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].values.iter().map(|&x| x * k).collect()
        };
        self.tape.push(r, co, out, self.rg(), Op::Scale { a: self.id, k })
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Tensor<F> {
        let (r, co) = self.shape();
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = vec![F::zero(); x.len()];
            for i in 0..r {
                let row = &x[i * co..(i + 1) * co];
                let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..co {
                    let e = (row[j] - m).exp();
                    o[i * co + j] = e;
                    sum += e;
                }
                for j in 0..co {
                    o[i * co + j] = o[i * co + j] / sum;
                }
            }
            o
        };
        self.tape.push(r, co, out, self.rg(), Op::SoftmaxRows { a: self.id })
    }

    pub fn log_softmax_rows(&self) -> Tensor<F> {
        let (r, co) = self.shape();
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = vec![F::zero(); x.len()];
            for i in 0..r {
                let row = &x[i * co..(i + 1) * co];
                let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..co {
                    sum += (row[j] - m).exp();
                }
                let lse = m + sum.ln();
                for j in 0..co {
                    o[i * co + j] = row[j] - lse;
                }
            }
            o
        };
        self.tape.push(r, co, out, self.rg(), Op::LogSoftmaxRows { a: self.id })
    }

    /// Row standardization (eps-stabilized), then scale by `gain` and shift by `bias`.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let (r, d) = self.shape();
        let (gr, gc) = gain.shape();
        let (br, bc) = bias.shape();
        if gr != 1 || gc != d {
            return Err(Error::Dim { op: "layer_norm", lhs: vec![r, d], rhs: vec![gr, gc] });
        }
        if br != 1 || bc != d {
            return Err(Error::Dim { op: "layer_norm", lhs: vec![r, d], rhs: vec![br, bc] });
        }
        let (out, xhat, inv_std) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let g = &inner.nodes[gain.id].values;
            let b = &inner.nodes[bias.id].values;
            let mut out = vec![F::zero(); x.len()];
            let mut xhat = vec![F::zero(); x.len()];
            let mut inv_std = vec![F::zero(); r];
            let nd = c::<F>(d as f64);
            for i in 0..r {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().cloned().sum::<F>() / nd;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nd;
                let is = (var + eps).sqrt().recip();
                inv_std[i] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[i * d + j] = xh;
                    out[i * d + j] = xh * g[j] + b[j];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.rg() || gain.rg() || bias.rg();
        Ok(self.tape.push(
            r,
            d,
            out,
            rg,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
        ))
    }

    /// Row gather: output row t is row ids[t] of self.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let (r, co) = self.shape();
        for (pos, &id) in ids.iter().enumerate() {
            if id >= r {
                return Err(Error::Index { op: "gather_rows", id, limit: r, position: pos });
            }
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = Vec::with_capacity(ids.len() * co);
            for &id in ids {
                o.extend_from_slice(&x[id * co..(id + 1) * co]);
            }
            o
        };
        Ok(self.tape.push(ids.len(), co, out, self.rg(), Op::GatherRows { src: self.id, ids: ids.to_vec() }))
    }

    /// Transpose-view gather: output row t is column ids[t] of self.
    pub fn embed_cols(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let (r, co) = self.shape();
        for (pos, &id) in ids.iter().enumerate() {
            if id >= co {
                return Err(Error::Index { op: "embed_cols", id, limit: co, position: pos });
            }
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = Vec::with_capacity(ids.len() * r);
            for &id in ids {
                for i in 0..r {
                    o.push(x[i * co + id]);
                }
            }
            o
        };
        Ok(self.tape.push(ids.len(), r, out, self.rg(), Op::EmbedCols { src: self.id, ids: ids.to_vec() }))
    }

    /// Pick arbitrary (row, col) elements into a 1xK row.
    pub fn gather_elems(&self, idx: &[(usize, usize)]) -> Result<Tensor<F>> {
        let (r, co) = self.shape();
        for (pos, &(i, j)) in idx.iter().enumerate() {
            if i >= r || j >= co {
                return Err(Error::Index { op: "gather_elems", id: i * co + j, limit: r * co, position: pos });
            }
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            idx.iter().map(|&(i, j)| x[i * co + j]).collect()
        };
        Ok(self.tape.push(1, idx.len(), out, self.rg(), Op::GatherElems { src: self.id, idx: idx.to_vec() }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        let (r, co) = self.shape();
        if start + len > co {
            return Err(Error::Dim { op: "slice_cols", lhs: vec![r, co], rhs: vec![start, len] });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = Vec::with_capacity(r * len);
            for i in 0..r {
                o.extend_from_slice(&x[i * co + start..i * co + start + len]);
            }
            o
        };
        Ok(self.tape.push(r, len, out, self.rg(), Op::SliceCols { a: self.id, start }))
    }

    pub fn concat_cols(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let r = parts[0].rows();
        let mut total = 0;
        for p in parts {
            if p.rows() != r {
                return Err(Error::Dim { op: "concat_cols", lhs: vec![r], rhs: vec![p.rows()] });
            }
            total += p.cols();
        }
        let out = {
            let inner = tape.inner.borrow();
            let mut o = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    let n = &inner.nodes[p.id];
                    o.extend_from_slice(&n.values[i * n.cols..(i + 1) * n.cols]);
                }
            }
            o
        };
        let rg = parts.iter().any(|p| p.rg());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(r, total, out, rg, Op::ConcatCols { parts: ids }))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].values.iter().cloned().sum::<F>()
        };
        self.tape.push(1, 1, vec![s], self.rg(), Op::SumAll { a: self.id })
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.rows() * self.cols();
        self.sum_all().scale(c::<F>(1.0 / n as f64))
    }

    /// Mean over rows: 1xD.
    pub fn mean_rows(&self) -> Result<Tensor<F>> {
        let r = self.rows();
        let w = self.tape.constant(1, r, vec![c::<F>(1.0 / r as f64); r]);
        w.matmul(self)
    }

    /// Elementwise log(exp(a) + exp(b)); -inf on both sides stays -inf.
    pub fn lse2(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, co) = self.zip_shape(b, "lse2")?;
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id]
                .values
                .iter()
                .zip(&inner.nodes[b.id].values)
                .map(|(&x, &y)| {
                    let m = x.max(y);
                    if m == F::neg_infinity() {
                        F::neg_infinity()
                    } else {
                        m + ((x - m).exp() + (y - m).exp()).ln()
                    }
                })
                .collect()
        };
        Ok(self.tape.push(r, co, out, self.rg2(b), Op::Lse2 { a: self.id, b: b.id }))
    }

    /// Shift every row right by `by`, filling vacated slots with -inf.
    pub fn shift_cols(&self, by: usize) -> Tensor<F> {
        let (r, co) = self.shape();
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let mut o = vec![F::neg_infinity(); r * co];
            for i in 0..r {
                for j in by..co {
                    o[i * co + j] = x[i * co + j - by];
                }
            }
            o
        };
        self.tape.push(r, co, out, self.rg(), Op::ShiftCols { a: self.id, by })
    }

    /// Mean of elementwise squared differences.
    pub fn mse(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_shape(b, "mse")?;
        let d = self.sub(b)?;
        let sq = d.mul_elem(&d)?;
        Ok(sq.mean_all())
    }

    /// Mean over unmasked positions of -log softmax(logits)[target].
    pub fn masked_cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor<F>> {
        let (t, v) = self.shape();
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dim { op: "masked_cross_entropy", lhs: vec![t, v], rhs: vec![targets.len(), mask.len()] });
        }
        let idx: Vec<(usize, usize)> = targets
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(i, (&tg, _))| (i, tg))
            .collect();
        if idx.is_empty() {
            return Err(Error::DegenerateBatch("all positions masked in cross entropy".into()));
        }
        for (pos, &(_, tg)) in idx.iter().enumerate() {
            if tg >= v {
                return Err(Error::Index { op: "masked_cross_entropy", id: tg, limit: v, position: pos });
            }
        }
        let k = idx.len();
        let ls = self.log_softmax_rows();
        let picked = ls.gather_elems(&idx)?;
        Ok(picked.sum_all().scale(c::<F>(-1.0 / k as f64)))
    }

    /// Inverted dropout. Identity at rate 0 or when `train` is false.
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut RngState) -> Tensor<F> {
        if !train || rate == 0.0 {
            return self.clone();
        }
        let (r, co) = self.shape();
        let keep = 1.0 - rate;
        let inv = c::<F>(1.0 / keep);
        let mask: Vec<F> = (0..r * co)
            .map(|_| if rng.bernoulli(keep) { inv } else { F::zero() })
            .collect();
        let m = self.tape.constant(r, co, mask);
        self.mul_elem(&m).expect("same shape")
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        let (r, co) = self.shape();
        if r * co != 1 {
            return Err(Error::Contract(format!("backward requires a scalar loss, got {r}x{co}")));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("tape already consumed by a previous backward".into()));
        }
        inner.consumed = true;
        if !inner.nodes[self.id].requires_grad {
            return Ok(());
        }
        inner.nodes[self.id].grad = Some(vec![F::one()]);
        for i in (0..=self.id).rev() {
            backprop(&mut inner.nodes, i);
        }
        Ok(())
    }
}

/// Row gather out of an embedding table, the standalone lookup primitive.
pub fn embedding_lookup<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    if ids.is_empty() {
        let cols = table.cols();
        return Ok(table.tape().constant(0, cols, Vec::new()));
    }
    table.gather_rows(ids)
}

fn add_into<F: Scalar>(grad: &mut Option<Vec<F>>, len: usize, f: impl FnOnce(&mut [F])) {
    let buf = grad.get_or_insert_with(|| vec![F::zero(); len]);
    f(buf);
}

/// Propagate the gradient of node `i` into its inputs.
fn backprop<F: Scalar>(nodes: &mut [Node<F>], i: usize) {
    if nodes[i].grad.is_none() {
        return;
    }
    let g = nodes[i].grad.clone().unwrap();
    let (rows, cols) = (nodes[i].rows, nodes[i].cols);
    // Inputs always precede outputs on the tape, so indices below are < i.
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (ar, ac) = (nodes[a].rows, nodes[a].cols);
            if nodes[a].requires_grad {
                let bv = nodes[b].values.clone();
                let ga = mm_nt(&g, rows, cols, &bv, ac);
                add_into(&mut nodes[a].grad, ar * ac, |buf| {
                    for (o, v) in buf.iter_mut().zip(&ga) {
                        *o += *v;
                    }
                });
            }
            if nodes[b].requires_grad {
                let av = nodes[a].values.clone();
                let gb = mm_tn(&av, ar, ac, &g, cols);
                add_into(&mut nodes[b].grad, ac * cols, |buf| {
                    for (o, v) in buf.iter_mut().zip(&gb) {
                        *o += *v;
                    }
                });
            }
        }
        Op::MatmulNT { a, b } => {
            let (a, b) = (*a, *b);
            let (ar, ac) = (nodes[a].rows, nodes[a].cols);
            let br = nodes[b].rows;
            if nodes[a].requires_grad {
                // c = a b^T : dA = g * b
                let bv = nodes[b].values.clone();
                let ga = mm(&g, rows, cols, &bv, ac);
                add_into(&mut nodes[a].grad, ar * ac, |buf| {
                    for (o, v) in buf.iter_mut().zip(&ga) {
                        *o += *v;
                    }
                });
            }
            if nodes[b].requires_grad {
                // dB = g^T * a
                let av = nodes[a].values.clone();
                let gb = mm_tn(&g, rows, cols, &av, ac);
                add_into(&mut nodes[b].grad, br * ac, |buf| {
                    for (o, v) in buf.iter_mut().zip(&gb) {
                        *o += *v;
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for &x in &[*a, *b] {
                if nodes[x].requires_grad {
                    add_into(&mut nodes[x].grad, g.len(), |buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += *v;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for (o, v) in buf.iter_mut().zip(&g) {
                        *o += *v;
                    }
                });
            }
            if nodes[b].requires_grad {
                add_into(&mut nodes[b].grad, g.len(), |buf| {
                    for (o, v) in buf.iter_mut().zip(&g) {
                        *o -= *v;
                    }
                });
            }
        }
        Op::MulElem { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let bv = nodes[b].values.clone();
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for ((o, v), w) in buf.iter_mut().zip(&g).zip(&bv) {
                        *o += *v * *w;
                    }
                });
            }
            if nodes[b].requires_grad {
                let av = nodes[a].values.clone();
                add_into(&mut nodes[b].grad, g.len(), |buf| {
                    for ((o, v), w) in buf.iter_mut().zip(&g).zip(&av) {
                        *o += *v * *w;
                    }
                });
            }
        }
        Op::AddRow { a, row } => {
            let (a, row) = (*a, *row);
            if nodes[a].requires_grad {
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for (o, v) in buf.iter_mut().zip(&g) {
                        *o += *v;
                    }
                });
            }
            if nodes[row].requires_grad {
                add_into(&mut nodes[row].grad, cols, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[i * cols + j];
                        }
                    }
                });
            }
        }
        Op::Scale { a, k } => {
            let (a, k) = (*a, *k);
            if nodes[a].requires_grad {
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for (o, v) in buf.iter_mut().zip(&g) {
                        *o += *v * k;
                    }
                });
            }
        }
        Op::SoftmaxRows { a } => {
            let a = *a;
            if nodes[a].requires_grad {
                let y = nodes[i].values.clone();
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            buf[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmaxRows { a } => {
            let a = *a;
            if nodes[a].requires_grad {
                let y = nodes[i].values.clone();
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: F = gr.iter().cloned().sum();
                        for j in 0..cols {
                            buf[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let xhat = xhat.clone();
            let inv_std = inv_std.clone();
            let gv = nodes[gain].values.clone();
            let d = cols;
            let nd = c::<F>(d as f64);
            if nodes[x].requires_grad {
                add_into(&mut nodes[x].grad, rows * d, |buf| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xh = F::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xh += dxh * xh[j];
                        }
                        let m1 = sum_dxhat / nd;
                        let m2 = sum_dxhat_xh / nd;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            buf[r * d + j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            if nodes[gain].requires_grad {
                add_into(&mut nodes[gain].grad, d, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
            }
            if nodes[bias].requires_grad {
                add_into(&mut nodes[bias].grad, d, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
        }
        Op::GatherRows { src, ids } => {
            let src = *src;
            let ids = ids.clone();
            if nodes[src].requires_grad {
                let n = nodes[src].rows * nodes[src].cols;
                add_into(&mut nodes[src].grad, n, |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            buf[id * cols + j] += g[t * cols + j];
                        }
                    }
                });
            }
        }
        Op::EmbedCols { src, ids } => {
            let src = *src;
            let ids = ids.clone();
            if nodes[src].requires_grad {
                let (sr, sc) = (nodes[src].rows, nodes[src].cols);
                add_into(&mut nodes[src].grad, sr * sc, |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            buf[j * sc + id] += g[t * cols + j];
                        }
                    }
                });
            }
        }
        Op::GatherElems { src, idx } => {
            let src = *src;
            let idx = idx.clone();
            if nodes[src].requires_grad {
                let (sr, sc) = (nodes[src].rows, nodes[src].cols);
                add_into(&mut nodes[src].grad, sr * sc, |buf| {
                    for (t, &(r, cidx)) in idx.iter().enumerate() {
                        buf[r * sc + cidx] += g[t];
                    }
                });
            }
        }
        Op::SliceCols { a, start } => {
            let (a, start) = (*a, *start);
            if nodes[a].requires_grad {
                let (ar, ac) = (nodes[a].rows, nodes[a].cols);
                add_into(&mut nodes[a].grad, ar * ac, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * ac + start + j] += g[r * cols + j];
                        }
                    }
                });
            }
        }
        Op::ConcatCols { parts } => {
            let parts = parts.clone();
            let mut offset = 0;
            for p in parts {
                let pc = nodes[p].cols;
                if nodes[p].requires_grad {
                    add_into(&mut nodes[p].grad, rows * pc, |buf| {
                        for r in 0..rows {
                            for j in 0..pc {
                                buf[r * pc + j] += g[r * cols + offset + j];
                            }
                        }
                    });
                }
                offset += pc;
            }
        }
        Op::SumAll { a } => {
            let a = *a;
            if nodes[a].requires_grad {
                let n = nodes[a].rows * nodes[a].cols;
                let gv = g[0];
                add_into(&mut nodes[a].grad, n, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
        Op::Lse2 { a, b } => {
            let (a, b) = (*a, *b);
            let out = nodes[i].values.clone();
            for &(x, other_is_b) in &[(a, false), (b, true)] {
                if nodes[x].requires_grad {
                    let xv = nodes[x].values.clone();
                    let _ = other_is_b;
                    add_into(&mut nodes[x].grad, g.len(), |buf| {
                        for j in 0..out.len() {
                            if out[j] != F::neg_infinity() {
                                buf[j] += g[j] * (xv[j] - out[j]).exp();
                            }
                        }
                    });
                }
            }
        }
        Op::ShiftCols { a, by } => {
            let (a, by) = (*a, *by);
            if nodes[a].requires_grad {
                add_into(&mut nodes[a].grad, g.len(), |buf| {
                    for r in 0..rows {
                        for j in by..cols {
                            buf[r * cols + j - by] += g[r * cols + j];
                        }
                    }
                });
            }
        }
    }
}
