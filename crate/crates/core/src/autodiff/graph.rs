use std::collections::HashMap;
use std::rc::Rc;

use super::gemm::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Elu(Var),
    Softplus(Var),
    Square(Var),
    Minimum(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Transpose(Var),
    GroupMax { input: Var, argmax: Vec<usize> },
    RepeatRows(Var, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Softmax(Var),
    LayerNorm { input: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    Attention(Box<AttentionSaved>),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    seq: usize,
    mask: Rc<[bool]>,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for one forward/backward pass.
///
/// A graph is single-threaded; build a fresh one per step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient accumulated at `var`, if any flowed there.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Parameters that received a gradient.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().filter(|(_, v)| self.grads[v.0].is_some()).map(|(id, _)| *id)
    }

    /// Largest absolute gradient entry over the given parameters (0 if none).
    pub fn max_abs(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.param(id))
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(rows, last_dim)` view of a tensor.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let c = *t.shape().last().unwrap_or(&1);
    (if c == 0 { 0 } else { t.len() / c }, c)
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf input; with `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Pulls a parameter into the graph. Repeated calls return the same node,
    /// so multiple uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Copies the value into a fresh constant; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(invalid(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(invalid(format!("bmm needs 3-D operands, got {sa:?} and {sb:?}")));
        }
        let (ba, m, k) = (sa[0], sa[1], sa[2]);
        let (bb, k2, n) = (sb[0], sb[1], sb[2]);
        if ba != bb || k != k2 {
            return Err(invalid(format!("bmm: {sa:?} by {sb:?}")));
        }
        let mut out = vec![0.0; ba * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(m, k, n, &ad[i * m * k..], false, &bd[i * k * n..], false, &mut out[i * m * n..], false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ba, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (_, c) = rows_cols(self.value(x));
        if self.value(row).len() != c {
            return Err(invalid(format!(
                "{what}: row of {} values for last dimension {c}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| f(*v, r[i % c])).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, op, rg))
    }

    /// Adds a vector to every row (last dimension).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Multiplies by a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(invalid("scale_by: scale must have one element"));
        }
        let sv = self.value(s).item();
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// ELU with unit slope for negative inputs.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols: no inputs"))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(invalid(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows: no inputs"))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(invalid(format!("concat_rows: {c} cols vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > cols {
            return Err(invalid(format!("slice_cols {start}..{end} of {cols}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, end - start], out)?, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > rows {
            return Err(invalid(format!("slice_rows {start}..{end} of {rows}")));
        }
        let out = self.value(x).data()[start * cols..end * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, cols], out)?, Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Max over consecutive groups of `k` rows: `[G*k, C] -> [G, C]`.
    /// Gradient flows to the first row attaining the maximum.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if k == 0 || rows % k != 0 {
            return Err(invalid(format!("group_max: {rows} rows not divisible into groups of {k}")));
        }
        let groups = rows / k;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            let a = &mut argmax[g * c..(g + 1) * c];
            for r in g * k..(g + 1) * k {
                let row = &d[r * c..(r + 1) * c];
                for j in 0..c {
                    if row[j] > o[j] || r == g * k {
                        o[j] = row[j];
                        a[j] = r;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![groups, c], out)?, Op::GroupMax { input: x, argmax }, rg))
    }

    /// Repeats each row `k` times consecutively: `[G, C] -> [G*k, C]`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (g, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(g * k * c);
        for r in 0..g {
            for _ in 0..k {
                out.extend_from_slice(&d[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![g * k, c], out)?, Op::RepeatRows(x, k), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums each row: `[N, C] -> [N, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::SumCols(x), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last dimension restricted to entries where `mask` is
    /// true. Masked entries are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(invalid("masked_softmax: mask size mismatch"));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = rows_cols(t);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let visible = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if visible(j) {
                    mx = mx.max(d[r * c + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if visible(j) {
                    let e = (d[r * c + j] - mx).exp();
                    out[r * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[r * c + j] /= z;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = rows_cols(t);
        let d = t.data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mu) * is;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LayerNorm { input: x, xhat, inv_std }, rg))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid(format!("gather_rows: index {bad} out of {rows}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, dim]` with `dim` split evenly across
    /// `heads`. `mask[b * seq * seq + i * seq + j]` says whether position `i`
    /// of sequence `b` may attend to position `j`. Rows with nothing visible
    /// produce zeros and pass no gradient.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, mask: Rc<[bool]>) -> Result<Var> {
        let (rows, dim) = self.value(q).dims2()?;
        same_shape(self.value(q), self.value(k), "attention keys")?;
        same_shape(self.value(q), self.value(v), "attention values")?;
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("attention: dim {dim} not divisible by {heads} heads")));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(invalid(format!("attention: {rows} rows not divisible into {batch} sequences")));
        }
        let seq = rows / batch;
        if mask.len() != batch * seq * seq {
            return Err(invalid(format!("attention: mask has {} entries, need {}", mask.len(), batch * seq * seq)));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let m = &mask[b * seq * seq..(b + 1) * seq * seq];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * dim + off..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if m[i * seq + j] {
                            let kj = &kd[(b * seq + j) * dim + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = 0.0;
                    for j in 0..seq {
                        if m[i * seq + j] {
                            let e = (scores[j] - mx).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * dim + off..][..dh];
                    for j in 0..seq {
                        if m[i * seq + j] {
                            p[j] /= z;
                            let vj = &vd[(b * seq + j) * dim + off..][..dh];
                            for (od, vv) in o.iter_mut().zip(vj) {
                                *od += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved { q, k, v, heads, batch, seq, mask, probs };
        Ok(self.push(Tensor::new(vec![rows, dim], out)?, Op::Attention(Box::new(saved)), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Lazily allocated accumulator for a parent that requires grad.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.rg(v) {
                    let len = self.value(v).len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        // Adds `g` unchanged into a parent's accumulator.
        macro_rules! pass {
            ($v:expr) => {{
                let v: Var = $v;
                if self.rg(v) {
                    match &mut grads[v.0] {
                        Some(t) => t.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        slot => *slot = Some(g.to_vec()),
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    gemm(m, n, k, g, false, bd, true, ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(k, m, n, ad, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul(a, b) => {
                let s = self.value(*a).shape();
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.value(*b).shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for t in 0..bs {
                        gemm(m, n, k, &g[t * m * n..], false, &bd[t * k * n..], true, &mut ga[t * m * k..], true);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for t in 0..bs {
                        gemm(k, m, n, &ad[t * m * k..], true, &g[t * m * n..], false, &mut gb[t * k * n..], true);
                    }
                }
            }
            Op::Add(a, b) => {
                pass!(*a);
                pass!(*b);
            }
            Op::Sub(a, b) => {
                pass!(*a);
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        if ad[j] <= bd[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        if ad[j] > bd[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::AddRow(x, row) => {
                let c = self.value(*row).len();
                pass!(*x);
                if let Some(gr) = acc!(*row) {
                    for (j, v) in g.iter().enumerate() {
                        gr[j % c] += v;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let c = self.value(*row).len();
                let (xd, rd) = (self.value(*x).data(), self.value(*row).data());
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * rd[j % c];
                    }
                }
                if let Some(gr) = acc!(*row) {
                    for j in 0..g.len() {
                        gr[j % c] += g[j] * xd[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let xd = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * sv);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => pass!(*x),
            Op::Exp(x) => {
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * out[j];
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xd[j];
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                }
            }
            Op::Elu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        let d = if xd[j] > 0.0 { 1.0 } else { out[j] + 1.0 };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * sigmoid(xd[j]);
                    }
                }
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += 2.0 * g[j] * xd[j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if let Some(gp) = acc!(p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = acc!(p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, w) = node.value.dims2().unwrap();
                let cols = self.value(*x).dims2().unwrap().1;
                if let Some(gx) = acc!(*x) {
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let cols = self.value(*x).dims2().unwrap().1;
                if let Some(gx) = acc!(*x) {
                    gx[start * cols..start * cols + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                if let Some(gx) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::GroupMax { input, argmax } => {
                let c = self.value(*input).dims2().unwrap().1;
                if let Some(gx) = acc!(*input) {
                    for (o, &r) in argmax.iter().enumerate() {
                        gx[r * c + o % c] += g[o];
                    }
                }
            }
            Op::RepeatRows(x, k) => {
                let (rows, c) = self.value(*x).dims2().unwrap();
                if let Some(gx) = acc!(*x) {
                    for r in 0..rows {
                        for t in 0..*k {
                            let src = &g[(r * k + t) * c..][..c];
                            gx[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::SumCols(x) => {
                let c = self.value(*x).dims2().unwrap().1;
                if let Some(gx) = acc!(*x) {
                    for (j, a) in gx.iter_mut().enumerate() {
                        *a += g[j / c];
                    }
                }
            }
            Op::Softmax(input) => {
                let (rows, c) = rows_cols(&node.value);
                if let Some(gx) = acc!(*input) {
                    for r in 0..rows {
                        let p = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, xhat, inv_std } => {
                let (rows, c) = rows_cols(&node.value);
                if let Some(gx) = acc!(*input) {
                    let cf = c as f64;
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let sg: f64 = gr.iter().sum();
                        let sgx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] / cf * (cf * gr[j] - sg - xr[j] * sgx);
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).dims2().unwrap().1;
                if let Some(gx) = acc!(*x) {
                    for (o, &r) in idx.iter().enumerate() {
                        gx[r * c..(r + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, dim) = self.value(s.q).dims2().unwrap();
        let (seq, heads, batch) = (s.seq, s.heads, s.batch);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let mut gq = vec![0.0; rows * dim];
        let mut gk = vec![0.0; rows * dim];
        let mut gv = vec![0.0; rows * dim];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let m = &s.mask[b * seq * seq..(b + 1) * seq * seq];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &s.probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[(b * seq + i) * dim + off..][..dh];
                    let mut dot = 0.0;
                    let mut any = false;
                    for j in 0..seq {
                        if m[i * seq + j] {
                            any = true;
                            let vj = &vd[(b * seq + j) * dim + off..][..dh];
                            dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                            dot += p[j] * dp[j];
                            let gvj = &mut gv[(b * seq + j) * dim + off..][..dh];
                            for (a, c) in gvj.iter_mut().zip(go) {
                                *a += p[j] * c;
                            }
                        }
                    }
                    if !any {
                        continue;
                    }
                    let qi = &qd[(b * seq + i) * dim + off..][..dh];
                    for j in 0..seq {
                        if m[i * seq + j] {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[(b * seq + j) * dim + off..][..dh];
                            let gqi = &mut gq[(b * seq + i) * dim + off..][..dh];
                            for (a, c) in gqi.iter_mut().zip(kj) {
                                *a += ds * c;
                            }
                            let gkj = &mut gk[(b * seq + j) * dim + off..][..dh];
                            for (a, c) in gkj.iter_mut().zip(qi) {
                                *a += ds * c;
                            }
                        }
                    }
                }
            }
        }
        for (var, local) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
            if self.rg(var) {
                match &mut grads[var.0] {
                    Some(target) => target.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(local),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t2(1, 4, &[0.3; 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn elu_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.elu(x);
        assert_eq!(g.value(y).item(), 0.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let a = g.square(x);
        let b = g.scale(x, 5.0);
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[11.0]);
    }

    #[test]
    fn param_reuse_shares_node() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[3.0]);
        assert!(grads.wrt(d).is_none());
    }

    #[test]
    fn group_max_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.leaf(t2(4, 1, &[1.0, 5.0, 5.0, 2.0]), true);
        let y = g.group_max(x, 4).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 3, &[0.0; 6]));
        let b = g.constant(t2(2, 2, &[0.0; 4]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(t2(1, 4, &[0.1, 0.2, 0.3, 0.4]));
        let k = g.constant(t2(1, 4, &[1.0, -1.0, 0.5, 0.0]));
        let v = g.constant(t2(1, 4, &[7.0, 8.0, 9.0, 10.0]));
        let o = g.attention(q, k, v, 2, 1, Rc::from(vec![true])).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        let mut g = Graph::new();
        let q = g.constant(t2(3, 2, &[0.5; 6]));
        let k = g.constant(t2(3, 2, &[0.5; 6]));
        let v = g.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let o = g.attention(q, k, v, 1, 1, Rc::from(vec![true; 9])).unwrap();
        for r in 0..3 {
            assert!((g.value(o).row(r)[0] - 3.0).abs() < 1e-12);
            assert!((g.value(o).row(r)[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_fully_masked_row_is_zero_and_inert() {
        let mut g = Graph::new();
        let q = g.leaf(t2(2, 2, &[0.3, -0.1, 0.2, 0.4]), true);
        let k = g.leaf(t2(2, 2, &[0.7, 0.1, -0.5, 0.3]), true);
        let v = g.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let mask: Rc<[bool]> = Rc::from(vec![true, false, false, false]);
        let o = g.attention(q, k, v, 1, 1, mask).unwrap();
        assert_eq!(g.value(o).row(1), &[0.0, 0.0]);
        let s = g.sum(o);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(q).unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(&grads.wrt(v).unwrap()[2..], &[0.0, 0.0]);
    }
}
