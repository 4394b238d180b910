//! Tape-based reverse-mode automatic differentiation.
//!
//! Sequences are stored time-major as `[T * B, D]` matrices: row `t * B + b`
//! holds step `t` of batch item `b`. Ops that need the sequence layout take
//! the batch size explicitly.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{gemm, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleShift { x: Var, scale: f64 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    ColConcat { parts: Vec<Var> },
    ColSlice { x: Var, start: usize },
    RowConcat { parts: Vec<Var> },
    RowSlice { x: Var, start: usize },
    MaskRows { x: Var, mask: Rc<Vec<bool>> },
    GruCell(Box<GruCache>),
    Im2Col { x: Var, batch: usize, kernel: usize, stride: usize },
    Gather { table: Var, indices: Rc<Vec<usize>> },
    SeqSoftmax { x: Var, batch: usize, mask: Rc<Vec<bool>> },
    SeqWeightedSum { x: Var, w: Var, batch: usize },
    AddBroadcastTime { x: Var, y: Var, batch: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Rc<Vec<Option<usize>>>, probs: Vec<f64>, scale: f64 },
    TripletHinge { d: Var, margin: f64 },
    Sum { x: Var },
}

struct GruCache {
    xp: Var,
    h: Var,
    wh: Var,
    bh: Var,
    mask: Rc<Vec<bool>>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_param: HashMap<usize, ParamId>,
}

/// A single forward pass. Create one per batch; drop it after `backward`.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        Var(inner.nodes.len() - 1)
    }

    /// Read a node's value.
    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bring a parameter into the graph. Repeated calls return the same node, so
    /// gradients from every use accumulate into one tensor.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.inner.borrow().params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        let mut inner = self.inner.borrow_mut();
        inner.params.insert(id, v);
        inner.leaf_param.insert(v.0, id);
        v
    }

    fn unary(&self, x: Var, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var {
        let value = self.with_value(x, f);
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            if bv.shape().len() != 2 {
                return Err(Error::shape(format!("matmul rhs must be 2-d, got {:?}", bv.shape())));
            }
            let (m, k) = (av.rows(), av.cols());
            let (k2, n) = if trans_b {
                (bv.shape()[1], bv.shape()[0])
            } else {
                (bv.shape()[0], bv.shape()[1])
            };
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul {:?} x {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if trans_b { "^T" } else { "" }
                )));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
            mat(m, n, out)
        };
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let bv = &inner.nodes[bias.0].value;
            let n = xv.cols();
            if bv.len() != n {
                return Err(Error::shape(format!(
                    "bias of length {} for {:?}",
                    bv.len(),
                    xv.shape()
                )));
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            check_same(av, bv, what)?;
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// `scale * x + shift`
    pub fn scale_shift(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |t| t.map(|v| scale * v + shift), Op::ScaleShift { x, scale })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |t| t.map(f64::tanh), Op::Tanh { x })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |t| t.map(sigmoid), Op::Sigmoid { x })
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, |t| Tensor::scalar(t.sum()), Op::Sum { x })
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.0].value).collect();
            let rows = vals.first().map(|v| v.rows()).unwrap_or(0);
            if vals.iter().any(|v| v.rows() != rows) {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    out.extend_from_slice(v.row(r));
                }
            }
            mat(rows, total, out)
        };
        Ok(self.push(value, Op::ColConcat { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            if start + len > xv.cols() {
                return Err(Error::shape(format!(
                    "slice_cols {start}+{len} of {:?}",
                    xv.shape()
                )));
            }
            let mut out = Vec::with_capacity(xv.rows() * len);
            for r in 0..xv.rows() {
                out.extend_from_slice(&xv.row(r)[start..start + len]);
            }
            mat(xv.rows(), len, out)
        };
        Ok(self.push(value, Op::ColSlice { x, start }))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.0].value).collect();
            let cols = vals.first().map(|v| v.cols()).unwrap_or(0);
            if vals.iter().any(|v| v.cols() != cols) {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for v in &vals {
                out.extend_from_slice(v.data());
            }
            mat(rows, cols, out)
        };
        Ok(self.push(value, Op::RowConcat { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            if start + len > xv.rows() {
                return Err(Error::shape(format!(
                    "slice_rows {start}+{len} of {:?}",
                    xv.shape()
                )));
            }
            let c = xv.cols();
            mat(len, c, xv.data()[start * c..(start + len) * c].to_vec())
        };
        Ok(self.push(value, Op::RowSlice { x, start }))
    }

    /// Zero every row whose mask entry is false.
    pub fn mask_rows(&self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            if mask.len() != xv.rows() {
                return Err(Error::shape("mask_rows: mask length differs from row count"));
            }
            let c = xv.cols();
            let mut out = xv.clone();
            for (row, &keep) in out.data_mut().chunks_mut(c).zip(mask.iter()) {
                if !keep {
                    row.fill(0.0);
                }
            }
            out
        };
        Ok(self.push(value, Op::MaskRows { x, mask }))
    }

    /// One GRU step with gate order `[r, z, n]`:
    ///
    /// ```text
    /// r = sigmoid(xp_r + h W_r + b_r)
    /// z = sigmoid(xp_z + h W_z + b_z)
    /// n = tanh(xp_n + r * (h W_n + b_n))
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// `xp` is the precomputed input projection (`B x 3H`), `wh` is `H x 3H`.
    /// Rows with a false mask entry carry `h` through unchanged.
    pub fn gru_cell(&self, xp: Var, h: Var, wh: Var, bh: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (value, cache) = {
            let inner = self.inner.borrow();
            let xpv = &inner.nodes[xp.0].value;
            let hv = &inner.nodes[h.0].value;
            let whv = &inner.nodes[wh.0].value;
            let bhv = &inner.nodes[bh.0].value;
            let (b, hd) = (hv.rows(), hv.cols());
            if xpv.rows() != b
                || xpv.cols() != 3 * hd
                || whv.shape() != [hd, 3 * hd]
                || bhv.len() != 3 * hd
                || mask.len() != b
            {
                return Err(Error::shape(format!(
                    "gru_cell: xp {:?}, h {:?}, wh {:?}, bh {:?}",
                    xpv.shape(),
                    hv.shape(),
                    whv.shape(),
                    bhv.shape()
                )));
            }
            let mut hp = vec![0.0; b * 3 * hd];
            for row in hp.chunks_mut(3 * hd) {
                row.copy_from_slice(bhv.data());
            }
            gemm(b, hd, 3 * hd, hv.data(), false, whv.data(), false, &mut hp, 1.0);
            let mut r = vec![0.0; b * hd];
            let mut z = vec![0.0; b * hd];
            let mut n = vec![0.0; b * hd];
            let mut hn = vec![0.0; b * hd];
            let mut out = hv.data().to_vec();
            for i in 0..b {
                if !mask[i] {
                    continue;
                }
                let x = &xpv.data()[i * 3 * hd..(i + 1) * 3 * hd];
                let p = &hp[i * 3 * hd..(i + 1) * 3 * hd];
                for j in 0..hd {
                    let k = i * hd + j;
                    let rr = sigmoid(x[j] + p[j]);
                    let zz = sigmoid(x[hd + j] + p[hd + j]);
                    let nn = (x[2 * hd + j] + rr * p[2 * hd + j]).tanh();
                    r[k] = rr;
                    z[k] = zz;
                    n[k] = nn;
                    hn[k] = p[2 * hd + j];
                    out[k] = (1.0 - zz) * nn + zz * hv.data()[k];
                }
            }
            (
                mat(b, hd, out),
                GruCache { xp, h, wh, bh, mask, r, z, n, hn },
            )
        };
        Ok(self.push(value, Op::GruCell(Box::new(cache))))
    }

    /// Gather sliding windows for a valid 1-d convolution over a time-major
    /// sequence: `[T * B, D] -> [T' * B, kernel * D]`, `T' = (T - kernel) / stride + 1`.
    pub fn im2col(&self, x: Var, batch: usize, kernel: usize, stride: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let d = xv.cols();
            if batch == 0 || !xv.rows().is_multiple_of(batch) {
                return Err(Error::shape("im2col: rows not divisible by batch"));
            }
            let steps = xv.rows() / batch;
            if steps < kernel || stride == 0 {
                return Err(Error::shape(format!(
                    "im2col: {steps} steps shorter than kernel {kernel}"
                )));
            }
            let out_steps = (steps - kernel) / stride + 1;
            let mut out = Vec::with_capacity(out_steps * batch * kernel * d);
            for t in 0..out_steps {
                for b in 0..batch {
                    for j in 0..kernel {
                        out.extend_from_slice(xv.row((t * stride + j) * batch + b));
                    }
                }
            }
            mat(out_steps * batch, kernel * d, out)
        };
        Ok(self.push(value, Op::Im2Col { x, batch, kernel, stride }))
    }

    pub fn gather(&self, table: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tv = &inner.nodes[table.0].value;
            let (v, e) = (tv.rows(), tv.cols());
            let mut out = Vec::with_capacity(indices.len() * e);
            for &i in indices.iter() {
                if i >= v {
                    return Err(Error::IndexOutOfRange { index: i, size: v });
                }
                out.extend_from_slice(tv.row(i));
            }
            mat(indices.len(), e, out)
        };
        Ok(self.push(value, Op::Gather { table, indices }))
    }

    /// Softmax over time of a `[T * B, 1]` score column, per batch item,
    /// restricted to rows whose mask is true. Masked rows get weight exactly 0.
    pub fn seq_softmax(&self, x: Var, batch: usize, mask: Rc<Vec<bool>>) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            if xv.cols() != 1 || xv.rows() != mask.len() || batch == 0 || !xv.rows().is_multiple_of(batch) {
                return Err(Error::shape(format!("seq_softmax over {:?}", xv.shape())));
            }
            let steps = xv.rows() / batch;
            let s = xv.data();
            let mut out = vec![0.0; s.len()];
            for b in 0..batch {
                let valid = (0..steps).map(|t| t * batch + b).filter(|&i| mask[i]);
                let max = valid.clone().map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::shape(format!("seq_softmax: item {b} has no valid step")));
                }
                let mut total = 0.0;
                for i in valid.clone() {
                    out[i] = (s[i] - max).exp();
                    total += out[i];
                }
                for i in valid {
                    out[i] /= total;
                }
            }
            mat(xv.rows(), 1, out)
        };
        Ok(self.push(value, Op::SeqSoftmax { x, batch, mask }))
    }

    /// `out[b] = sum_t w[t * B + b] * x[t * B + b]`
    pub fn seq_weighted_sum(&self, x: Var, w: Var, batch: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let wv = &inner.nodes[w.0].value;
            if wv.rows() != xv.rows() || wv.cols() != 1 || batch == 0 || !xv.rows().is_multiple_of(batch) {
                return Err(Error::shape(format!(
                    "seq_weighted_sum {:?} by {:?}",
                    xv.shape(),
                    wv.shape()
                )));
            }
            let d = xv.cols();
            let mut out = vec![0.0; batch * d];
            for (i, &wt) in wv.data().iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let b = i % batch;
                for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(xv.row(i)) {
                    *o += wt * v;
                }
            }
            mat(batch, d, out)
        };
        Ok(self.push(value, Op::SeqWeightedSum { x, w, batch }))
    }

    /// `out[t * B + b] = x[t * B + b] + y[b]`
    pub fn add_broadcast_time(&self, x: Var, y: Var, batch: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let yv = &inner.nodes[y.0].value;
            if yv.rows() != batch || yv.cols() != xv.cols() || !xv.rows().is_multiple_of(batch) {
                return Err(Error::shape(format!(
                    "add_broadcast_time {:?} + {:?}",
                    xv.shape(),
                    yv.shape()
                )));
            }
            let d = xv.cols();
            let mut out = xv.clone();
            for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
                for (o, v) in row.iter_mut().zip(yv.row(i % batch)) {
                    *o += v;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddBroadcastTime { x, y, batch }))
    }

    /// Divide each row by its Euclidean norm. A zero row is an error.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let c = xv.cols();
            let mut out = xv.clone();
            let mut norms = Vec::with_capacity(xv.rows());
            for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "row {r} has norm {norm}; cannot normalize"
                    )));
                }
                for v in row.iter_mut() {
                    *v /= norm;
                }
                norms.push(norm);
            }
            (out, norms)
        };
        Ok(self.push(value, Op::L2Normalize { x, norms }))
    }

    /// Negative log-softmax at the target of each row, skipping rows whose target is
    /// `None`. Max-subtracted for stability.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (loss, probs, scale) = {
            let inner = self.inner.borrow();
            let lv = &inner.nodes[logits.0].value;
            let (rows, v) = (lv.rows(), lv.cols());
            if targets.len() != rows {
                return Err(Error::shape("cross_entropy: one target per row required"));
            }
            let mut probs = vec![0.0; rows * v];
            let mut total = 0.0;
            let mut count = 0usize;
            for (r, target) in targets.iter().enumerate() {
                let Some(t) = *target else { continue };
                if t >= v {
                    return Err(Error::IndexOutOfRange { index: t, size: v });
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let p = &mut probs[r * v..(r + 1) * v];
                let mut z = 0.0;
                for (pi, &x) in p.iter_mut().zip(row) {
                    *pi = (x - max).exp();
                    z += *pi;
                }
                for pi in p.iter_mut() {
                    *pi /= z;
                }
                total += -(row[t] - max - z.ln());
                count += 1;
            }
            let scale = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean if count > 0 => 1.0 / count as f64,
                Reduction::Mean => 0.0,
            };
            (total * scale, probs, scale)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs, scale },
        ))
    }

    /// Bidirectional hinge loss over a `B x B` distance matrix whose diagonal holds
    /// matched pairs (rows: side a, columns: side b):
    ///
    /// `sum_k sum_{k' != k} max(0, d[k,k] - d[k',k] + margin) + max(0, d[k,k] - d[k,k'] + margin)`
    pub fn triplet_hinge(&self, d: Var, margin: f64) -> Result<Var> {
        let loss = {
            let inner = self.inner.borrow();
            let dv = &inner.nodes[d.0].value;
            let b = dv.rows();
            if dv.cols() != b {
                return Err(Error::shape(format!("triplet_hinge needs square matrix, got {:?}", dv.shape())));
            }
            let m = dv.data();
            let mut total = 0.0;
            for k in 0..b {
                let pos = m[k * b + k];
                for j in 0..b {
                    if j == k {
                        continue;
                    }
                    total += (pos - m[j * b + k] + margin).max(0.0);
                    total += (pos - m[k * b + j] + margin).max(0.0);
                }
            }
            total
        };
        Ok(self.push(Tensor::scalar(loss), Op::TripletHinge { d, margin }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        if inner.nodes[root.0].value.len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(inner.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &inner.nodes[idx];
            backprop(&inner.nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&node, &pid) in &inner.leaf_param {
            if let Some(g) = &grads[node] {
                params.insert(pid, g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.rows(), av.cols());
            let n = g.cols();
            // dA = G * op(B)^T
            accumulate_with(grads, *a, av.shape(), |da| {
                gemm(m, n, k, g.data(), false, bv.data(), !trans_b, da, 1.0);
            });
            // dB = A^T G  (or G^T A when B was transposed)
            accumulate_with(grads, *b, bv.shape(), |db| {
                if *trans_b {
                    gemm(n, m, k, g.data(), true, av.data(), false, db, 1.0);
                } else {
                    gemm(k, m, n, av.data(), true, g.data(), false, db, 1.0);
                }
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(grads, *x, g.clone());
            let n = g.cols();
            let shape = val(*bias).shape().to_vec();
            accumulate_with(grads, *bias, &shape, |db| {
                for row in g.data().chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub { a, b } => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|x| -x));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let ga = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            )
            .unwrap();
            let gb = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
            )
            .unwrap();
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::ScaleShift { x, scale } => accumulate(grads, *x, g.map(|v| v * scale)),
        Op::Tanh { x } => {
            let y = &node.value;
            let d = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
            accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
        Op::Sigmoid { x } => {
            let y = &node.value;
            let d = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
            accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
        Op::Sum { x } => {
            let gi = g.item();
            accumulate(grads, *x, Tensor::full(val(*x).shape(), gi));
        }
        Op::ColConcat { parts } => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let c = pv.cols();
                let shape = pv.shape().to_vec();
                accumulate_with(grads, *p, &shape, |dp| {
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + c];
                        for (d, s) in dp[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::ColSlice { x, start } => {
            let xv = val(*x);
            let (rows, total, len) = (xv.rows(), xv.cols(), g.cols());
            accumulate_with(grads, *x, xv.shape(), |dx| {
                for r in 0..rows {
                    let dst = &mut dx[r * total + start..r * total + start + len];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            });
        }
        Op::RowConcat { parts } => {
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let n = pv.len();
                let shape = pv.shape().to_vec();
                accumulate_with(grads, *p, &shape, |dp| {
                    for (d, s) in dp.iter_mut().zip(&g.data()[offset..offset + n]) {
                        *d += s;
                    }
                });
                offset += n;
            }
        }
        Op::RowSlice { x, start } => {
            let xv = val(*x);
            let c = xv.cols();
            accumulate_with(grads, *x, xv.shape(), |dx| {
                for (d, s) in dx[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                    *d += s;
                }
            });
        }
        Op::MaskRows { x, mask } => {
            let c = g.cols();
            let mut d = g.clone();
            for (row, &keep) in d.data_mut().chunks_mut(c).zip(mask.iter()) {
                if !keep {
                    row.fill(0.0);
                }
            }
            accumulate(grads, *x, d);
        }
        Op::GruCell(cache) => gru_backward(nodes, cache, g, grads),
        Op::Im2Col { x, batch, kernel, stride } => {
            let xv = val(*x);
            let d = xv.cols();
            let out_steps = g.rows() / batch;
            accumulate_with(grads, *x, xv.shape(), |dx| {
                for t in 0..out_steps {
                    for b in 0..*batch {
                        let grow = g.row(t * batch + b);
                        for j in 0..*kernel {
                            let src = (t * stride + j) * batch + b;
                            for (dst, s) in dx[src * d..(src + 1) * d]
                                .iter_mut()
                                .zip(&grow[j * d..(j + 1) * d])
                            {
                                *dst += s;
                            }
                        }
                    }
                }
            });
        }
        Op::Gather { table, indices } => {
            let tv = val(*table);
            let e = tv.cols();
            accumulate_with(grads, *table, tv.shape(), |dt| {
                for (r, &i) in indices.iter().enumerate() {
                    for (d, s) in dt[i * e..(i + 1) * e].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            });
        }
        Op::SeqSoftmax { x, batch, mask } => {
            let w = node.value.data();
            let gd = g.data();
            let steps = w.len() / batch;
            let mut dx = vec![0.0; w.len()];
            for b in 0..*batch {
                let idx = (0..steps).map(|t| t * batch + b).filter(|&i| mask[i]);
                let dot: f64 = idx.clone().map(|i| w[i] * gd[i]).sum();
                for i in idx {
                    dx[i] = w[i] * (gd[i] - dot);
                }
            }
            accumulate(grads, *x, mat(w.len(), 1, dx));
        }
        Op::SeqWeightedSum { x, w, batch } => {
            let (xv, wv) = (val(*x), val(*w));
            let d = xv.cols();
            let rows = xv.rows();
            let mut dx = vec![0.0; rows * d];
            let mut dw = vec![0.0; rows];
            for i in 0..rows {
                let b = i % batch;
                let grow = g.row(b);
                let wt = wv.data()[i];
                let xr = xv.row(i);
                let mut acc = 0.0;
                for j in 0..d {
                    dx[i * d + j] = wt * grow[j];
                    acc += xr[j] * grow[j];
                }
                dw[i] = acc;
            }
            accumulate(grads, *x, mat(rows, d, dx));
            accumulate(grads, *w, mat(rows, 1, dw));
        }
        Op::AddBroadcastTime { x, y, batch } => {
            accumulate(grads, *x, g.clone());
            let yv = val(*y);
            let d = yv.cols();
            accumulate_with(grads, *y, yv.shape(), |dy| {
                for (i, row) in g.data().chunks(d).enumerate() {
                    let b = i % batch;
                    for (dst, s) in dy[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *dst += s;
                    }
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let c = y.cols();
            let mut dx = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
        }
        Op::CrossEntropy { logits, targets, probs, scale } => {
            let lv = val(*logits);
            let v = lv.cols();
            let gs = g.item() * scale;
            let mut d = vec![0.0; lv.len()];
            for (r, target) in targets.iter().enumerate() {
                let Some(t) = *target else { continue };
                for j in 0..v {
                    d[r * v + j] = gs * (probs[r * v + j] - if j == t { 1.0 } else { 0.0 });
                }
            }
            accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d).unwrap());
        }
        Op::TripletHinge { d, margin } => {
            let dv = val(*d);
            let b = dv.rows();
            let m = dv.data();
            let gs = g.item();
            let mut dd = vec![0.0; b * b];
            for k in 0..b {
                let pos = m[k * b + k];
                for j in 0..b {
                    if j == k {
                        continue;
                    }
                    if pos - m[j * b + k] + margin > 0.0 {
                        dd[k * b + k] += gs;
                        dd[j * b + k] -= gs;
                    }
                    if pos - m[k * b + j] + margin > 0.0 {
                        dd[k * b + k] += gs;
                        dd[k * b + j] -= gs;
                    }
                }
            }
            accumulate(grads, *d, mat(b, b, dd));
        }
    }
}

fn gru_backward(nodes: &[Node], c: &GruCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let hv = &nodes[c.h.0].value;
    let whv = &nodes[c.wh.0].value;
    let (b, hd) = (hv.rows(), hv.cols());
    let mut dgates = vec![0.0; b * 3 * hd];
    let mut dh = vec![0.0; b * hd];
    for i in 0..b {
        if !c.mask[i] {
            dh[i * hd..(i + 1) * hd].copy_from_slice(g.row(i));
            continue;
        }
        let dg = &mut dgates[i * 3 * hd..(i + 1) * 3 * hd];
        for j in 0..hd {
            let k = i * hd + j;
            let go = g.data()[k];
            let (r, z, n, hn) = (c.r[k], c.z[k], c.n[k], c.hn[k]);
            let dn = go * (1.0 - z);
            let dz = go * (hv.data()[k] - n);
            dh[k] = go * z;
            let dan = dn * (1.0 - n * n);
            let dr = dan * hn;
            dg[j] = dr * r * (1.0 - r);
            dg[hd + j] = dz * z * (1.0 - z);
            dg[2 * hd + j] = dan;
        }
    }
    // Hidden-side pre-activation grads differ from input-side ones only in the n gate.
    let mut dhp = dgates.clone();
    for i in 0..b {
        for j in 0..hd {
            let k = i * hd + j;
            dhp[i * 3 * hd + 2 * hd + j] *= c.r[k];
        }
    }
    accumulate(grads, c.xp, mat(b, 3 * hd, dgates));
    accumulate_with(grads, c.wh, whv.shape(), |dw| {
        gemm(hd, b, 3 * hd, hv.data(), true, &dhp, false, dw, 1.0);
    });
    let bshape = nodes[c.bh.0].value.shape().to_vec();
    accumulate_with(grads, c.bh, &bshape, |db| {
        for row in dhp.chunks(3 * hd) {
            for (d, s) in db.iter_mut().zip(row) {
                *d += s;
            }
        }
    });
    gemm(b, 3 * hd, hd, &dhp, false, whv.data(), true, &mut dh, 1.0);
    accumulate(grads, c.h, mat(b, hd, dh));
}
