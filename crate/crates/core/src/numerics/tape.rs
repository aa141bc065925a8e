use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::math;
use super::tensor::split_axis;
use super::{ParamId, ParamStore, Rng, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Stored {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SumAxis(Var, usize),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Concat(Vec<Var>, usize),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Stored,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Parameters are referenced in place from the borrowed store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    pub(crate) fn into_params(mut self, n: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (id, v) in &self.params {
            if id.0 < n {
                out[id.0] = self.nodes[v.0].take();
            }
        }
        out
    }
}

/// Index map from an output element to the element of a broadcast operand.
enum Bcast {
    Same,
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], src: &[usize]) -> Bcast {
        if out == src {
            return Bcast::Same;
        }
        let src_n: usize = src.iter().product();
        if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
            return Bcast::Suffix(src_n);
        }
        let r = out.len();
        let pad = r - src.len();
        let mut strides = vec![0usize; r];
        let mut s = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[pad + i] = s;
            }
            s *= src[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Bcast::General(map)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::General(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    // For each element of the permuted output, its offset in the input.
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut off = 0;
    for _ in 0..total {
        offs.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offs
}

fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read from [`Gradients::of`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Leaf,
            requires_grad: self.store.get(id).requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let (ma, mb) = (Bcast::new(&shape, ta.shape()), Bcast::new(&shape, tb.shape()));
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch
    /// dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let nb: usize = batch.iter().product();
        let mut out = vec![0.0; nb * m * n];
        if sb.len() == 2 && sa[..sa.len() - 2] == batch[..] {
            gemm(nb * m, k, n, ta.data(), tb.data(), &mut out);
        } else {
            let ma = Bcast::new(&batch, &sa[..sa.len() - 2]);
            let mb = Bcast::new(&batch, &sb[..sb.len() - 2]);
            for bi in 0..nb {
                let (ia, ib) = (ma.get(bi), mb.get(bi));
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[ia * m * k..(ia + 1) * m * k],
                    &tb.data()[ib * k * n..(ib + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let r = ta.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", ta.shape(), perm));
        }
        let offs = permute_offsets(ta.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| ta.shape()[p]).collect();
        let data = offs.iter().map(|&o| ta.data()[o]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let target = broadcast_shape("broadcast_to", ta.shape(), shape)?;
        if target != shape {
            return Err(Error::shape("broadcast_to", ta.shape(), shape));
        }
        let map = Bcast::new(shape, ta.shape());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ta.data()[map.get(i)]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a), rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), None)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// excluded entries are exactly zero. `mask` covers the trailing
    /// `mask.len()` elements and repeats over the leading axes.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let ta = self.value(a);
        let w = *ta.shape().last().unwrap_or(&1);
        if mask.is_empty() || !ta.len().is_multiple_of(mask.len()) || !mask.len().is_multiple_of(w) {
            return Err(Error::shape("masked_softmax", ta.shape(), &[mask.len()]));
        }
        let out = softmax_rows(ta, Some(&mask))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Numeric {
                op: "sqrt",
                detail: "negative or NaN input".into(),
            });
        }
        Ok(self.unary(a, math::sqrt, Op::Sqrt(a)))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, move |x| if x > min { x } else { min }, Op::ClampMin(a, min))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::shape("sum_axis", ta.shape(), &[axis]));
        }
        let (outer, ext, inner) = split_axis(ta.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &ta.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `x · w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Layer normalization over the last axis with variance floor `eps`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let rows = tx.len() / d;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 1-D convolution over time. `x: [T, C_in]` or `[B, T, C_in]`,
    /// `w: [k, C_in, C_out]`; zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if stride == 0 || sw.len() != 3 || sx.len() < 2 || sx.len() > 3 || sx[sx.len() - 1] != sw[1] {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (k, cin, cout) = (sw[0], sw[1], sw[2]);
        let t = sx[sx.len() - 2];
        let batch = if sx.len() == 3 { sx[0] } else { 1 };
        let t_out = match conv_out_len(t, k, stride, padding) {
            Some(v) if v >= 1 => v,
            _ => {
                return Err(Error::InputTooShort {
                    op: "conv1d",
                    detail: format!("T={t} with kernel {k}, padding {padding}"),
                })
            }
        };
        let mut out = vec![0.0; batch * t_out * cout];
        for b in 0..batch {
            let xb = &tx.data()[b * t * cin..(b + 1) * t * cin];
            for to in 0..t_out {
                let orow = &mut out[(b * t_out + to) * cout..(b * t_out + to + 1) * cout];
                for j in 0..k {
                    let ti = (to * stride + j) as isize - padding as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let ti = ti as usize;
                    gemm(1, cin, cout, &xb[ti * cin..(ti + 1) * cin], &tw.data()[j * cin * cout..(j + 1) * cin * cout], orow);
                }
            }
        }
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape[r - 2] = t_out;
        shape[r - 1] = cout;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let ext = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || len == 0 || start + len > ta.shape()[axis] {
            return Err(Error::shape("slice", ta.shape(), &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(ta.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Embedding lookup: rows `ids` of `table: [V, d]` → `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: v,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `rng` is `None` (evaluation) or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.bernoulli(p) { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed in log
    /// space. `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        let probs = softmax_rows(t, None)?;
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    len: c,
                });
            }
            let row = t.row(b);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + math::ln(row.iter().map(|&v| math::exp(v - mx)).sum::<f64>());
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes_shape(i), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            nodes,
            params: self.param_nodes.clone(),
        })
    }

    fn nodes_shape(&self, i: usize) -> Vec<usize> {
        self.value(Var(i)).shape().to_vec()
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if let Some(ga) = self.acc(grads, v) {
                        let m = Bcast::new(out.shape(), self.shape(v));
                        for (j, gj) in g.iter().enumerate() {
                            ga[m.get(j)] += s * gj;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = Bcast::new(out.shape(), ta.shape());
                let mb = Bcast::new(out.shape(), tb.shape());
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        ga[ma.get(j)] += gj * tb.data()[mb.get(j)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[mb.get(j)] += gj * ta.data()[ma.get(j)];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gj) in ga.iter_mut().zip(g) {
                        *x += c * gj;
                    }
                }
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Permute(a, perm) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let offs = permute_offsets(self.shape(*a), perm);
                    for (gj, o) in g.iter().zip(offs) {
                        ga[o] += gj;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gj) in ga.iter_mut().zip(g) {
                        *x += gj;
                    }
                }
            }
            Op::BroadcastTo(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let m = Bcast::new(out.shape(), self.shape(*a));
                    for (j, gj) in g.iter().enumerate() {
                        ga[m.get(j)] += gj;
                    }
                }
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let w = *out.shape().last().unwrap_or(&1);
                    for ((y, gy), gx) in out
                        .data()
                        .chunks(w)
                        .zip(g.chunks(w))
                        .zip(ga.chunks_mut(w))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, y) in out.data().iter().enumerate() {
                        ga[j] += g[j] * (1.0 - y * y);
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, y) in out.data().iter().enumerate() {
                        ga[j] += g[j] * 0.5 / y;
                    }
                }
            }
            Op::ClampMin(a, min) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > *min {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut ga[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (j, gj) in g.iter().enumerate() {
                        gg[j % d] += gj * xhat[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[j % d] += gj;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[base + j] * gm[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[base + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            gx[base + j] += rs * (dxhat[j] - inv_d * s1 - xhat[base + j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (tx.shape(), tw.shape());
                let (k, cin, cout) = (sw[0], sw[1], sw[2]);
                let t = sx[sx.len() - 2];
                let batch = if sx.len() == 3 { sx[0] } else { 1 };
                let t_out = out.shape()[out.rank() - 2];
                let xd = tx.data();
                let wd = tw.data();
                let mut gx = if self.rg(*x) { Some(vec![0.0; xd.len()]) } else { None };
                let mut gw = if self.rg(*w) { Some(vec![0.0; wd.len()]) } else { None };
                for b in 0..batch {
                    for to in 0..t_out {
                        let go = &g[(b * t_out + to) * cout..(b * t_out + to + 1) * cout];
                        for j in 0..k {
                            let ti = (to * stride + j) as isize - *padding as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let row = (b * t + ti as usize) * cin;
                            let wj = &wd[j * cin * cout..(j + 1) * cin * cout];
                            if let Some(gx) = gx.as_mut() {
                                gemm_nt(1, cout, cin, go, wj, &mut gx[row..row + cin]);
                            }
                            if let Some(gw) = gw.as_mut() {
                                gemm_tn(1, cin, cout, &xd[row..row + cin], go, &mut gw[j * cin * cout..(j + 1) * cin * cout]);
                            }
                        }
                    }
                }
                if let Some(d) = gx {
                    add_into(self.acc(grads, *x), &d);
                }
                if let Some(d) = gw {
                    add_into(self.acc(grads, *w), &d);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut off = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + ext) * inner];
                            for (d, s) in gp[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                let len = out.shape()[*axis];
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        for (d, s) in ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[b * c + j] += scale * (probs[b * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .expect("validated in forward");
        let nb: usize = batch.iter().product();
        let flat = sb.len() == 2 && sa[..sa.len() - 2] == batch[..];
        if self.rg(a) {
            let mut ga = vec![0.0; ta.len()];
            if flat {
                gemm_nt(nb * m, n, k, g, tb.data(), &mut ga);
            } else {
                let ma = Bcast::new(&batch, &sa[..sa.len() - 2]);
                let mb = Bcast::new(&batch, &sb[..sb.len() - 2]);
                for bi in 0..nb {
                    let (ia, ib) = (ma.get(bi), mb.get(bi));
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[ib * k * n..(ib + 1) * k * n],
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                    );
                }
            }
            add_into(self.acc(grads, a), &ga);
        }
        if self.rg(b) {
            let mut gb = vec![0.0; tb.len()];
            if flat {
                gemm_tn(nb * m, k, n, ta.data(), g, &mut gb);
            } else {
                let ma = Bcast::new(&batch, &sa[..sa.len() - 2]);
                let mb = Bcast::new(&batch, &sb[..sb.len() - 2]);
                for bi in 0..nb {
                    let (ia, ib) = (ma.get(bi), mb.get(bi));
                    gemm_tn(
                        m,
                        k,
                        n,
                        &ta.data()[ia * m * k..(ia + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                    );
                }
            }
            add_into(self.acc(grads, b), &gb);
        }
    }

    /// Gradient buffer for `v`, created on first use; `None` when `v` does
    /// not require a gradient.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, src: &[f64]) {
    if let Some(dst) = dst {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Row-wise softmax over the last axis; `mask` (repeating) excludes entries.
pub(crate) fn softmax_rows(t: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric {
            op: "softmax",
            detail: "NaN input".into(),
        });
    }
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; t.len()];
    for (r, (row, dst)) in t.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[(r * w + j) % m.len()]);
        let mx = (0..w)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for j in 0..w {
            if keep(j) {
                dst[j] = math::exp(row[j] - mx);
                s += dst[j];
            }
        }
        for x in dst.iter_mut() {
            *x /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
