use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax { x: Var, axis: usize },
    AttentionWeights { q: Var, k: Var, scale: f64, causal: bool },
    Dropout { x: Var, mask: Vec<f64> },
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    Sum(Var),
    Mse { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Number of leading keys visible to query `i`.
fn key_range(i: usize, w: usize, causal: bool) -> usize {
    if causal {
        i.max(1)
    } else {
        w
    }
}

/// Split `shape` around `axis` into (outer, len, inner) strides.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Records a forward computation for one reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng))
    }

    /// Batched product over the leading axis; `trans_b` uses `b[i]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; bsz * m * n];
        let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        for i in 0..bsz {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_nt_into(ai, bi, oi, m, k, n);
            } else {
                matmul_into(ai, bi, oi, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![bsz, m, n], data: out }, Op::Bmm { a, b, trans_b }, ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(name, &ta.shape, &tb.shape));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x[..., j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape.last().unwrap_or(&0);
        if tb.len() != n {
            return Err(Error::shape("add_bias", &tx.shape, &tb.shape));
        }
        let mut t = tx.clone();
        for row in t.data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    /// Add a constant tensor (e.g. a `-inf` attention mask).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape != c.shape {
            return Err(Error::shape("add_const", &tx.shape, &c.shape));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&c.data).map(|(a, b)| a + b).collect(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::AddConst(x), ng))
    }

    /// Scale row `i` of `x` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != tx.rows() {
            return Err(Error::shape("mul_rows", &tx.shape, &ts.shape));
        }
        let k = tx.row_len();
        let mut t = tx.clone();
        for (i, row) in t.data.chunks_mut(k.max(1)).enumerate() {
            let f = ts.data[i];
            row.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulRows(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let len = t.shape[axis];
            for o in 0..outer {
                let src = &t.data[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + off * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            off += len;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::invalid("slice out of range"));
        }
        let (outer, full, inner) = split(&sx, axis);
        let mut shape = sx.clone();
        shape[axis] = len;
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = o * full * inner + start * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("transpose", &sx, &[]));
        }
        let r = sx.len();
        let (m, n) = (sx[r - 2], sx[r - 1]);
        let batch: usize = sx[..r - 2].iter().product();
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            transpose_into(&src[b * m * n..(b + 1) * m * n], &mut data[b * m * n..(b + 1) * m * n], m, n);
        }
        let mut shape = sx;
        shape.swap(r - 2, r - 1);
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", &t.shape, shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope;
            }
        });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(Error::invalid("softmax over an empty or missing axis"));
        }
        let (outer, len, inner) = split(&sx, axis);
        let mut data = self.value(x).data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(data[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = math::exp(data[at(k)] - max);
                    data[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    data[at(k)] /= sum;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: sx, data }, Op::Softmax { x, axis }, ng))
    }

    /// Softmax over keys of `scale · q kᵀ` per batch entry, `[b, w, d]`
    /// inputs to `[b, w, w]` weights. With `causal`, query `i` sees keys
    /// `j < i` (query 0 sees itself) and every other weight is exactly 0.
    pub fn attention_weights(&mut self, q: Var, k: Var, scale: f64, causal: bool) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3 || sq != sk || sq[1] == 0 {
            return Err(Error::shape("attention_weights", &sq, &sk));
        }
        let (bsz, w, d) = (sq[0], sq[1], sq[2]);
        let (qd, kd) = (&self.value(q).data, &self.value(k).data);
        let mut out = vec![0.0; bsz * w * w];
        let mut row = vec![0.0; w];
        for b in 0..bsz {
            for i in 0..w {
                let keys = key_range(i, w, causal);
                let qi = &qd[(b * w + i) * d..(b * w + i + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..keys {
                    let kj = &kd[(b * w + j) * d..(b * w + j + 1) * d];
                    let s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in &mut row[..keys] {
                    *r = math::exp(*r - max);
                    sum += *r;
                }
                let o = &mut out[(b * w + i) * w..(b * w + i) * w + keys];
                for (o, r) in o.iter_mut().zip(&row[..keys]) {
                    *o = r / sum;
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(
            Tensor { shape: vec![bsz, w, w], data: out },
            Op::AttentionWeights { q, k, scale, causal },
            ng,
        ))
    }

    /// Inverted dropout; the identity when `!train` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout probability must lie in [0, 1)"));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Rows `x[idx[k]]`, stacked.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = (tx.rows(), tx.row_len());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(alloc::format!("gather index {bad} >= {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let mut shape = tx.shape.clone();
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    /// `out[idx[k]] += x[k]` into `n` rows.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != idx.len() {
            return Err(Error::shape("scatter_add", &tx.shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(alloc::format!("scatter index {bad} >= {n}")));
        }
        let k = tx.row_len();
        let mut data = vec![0.0; n * k];
        for (r, &i) in idx.iter().enumerate() {
            for (d, s) in data[i * k..(i + 1) * k].iter_mut().zip(tx.row(r)) {
                *d += s;
            }
        }
        let mut shape = tx.shape.clone();
        shape[0] = n;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::ScatterAdd { x, idx: idx.to_vec() }, ng))
    }

    /// Softmax of the scalars `x[k]` within groups sharing `seg[k]`.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != seg.len() {
            return Err(Error::shape("segment_softmax", &tx.shape, &[seg.len()]));
        }
        let n = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&v, &s) in tx.data.iter().zip(seg) {
            max[s] = max[s].max(v);
        }
        let mut data: Vec<f64> = tx.data.iter().zip(seg).map(|(&v, &s)| math::exp(v - max[s])).collect();
        let mut sum = vec![0.0; n];
        for (&e, &s) in data.iter().zip(seg) {
            sum[s] += e;
        }
        for (e, &s) in data.iter_mut().zip(seg) {
            *e /= sum[s];
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::SegmentSoftmax { x, seg: seg.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error over entries where `mask` is true.
    pub fn mse(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape != target.shape {
            return Err(Error::shape("mse", &tp.shape, &target.shape));
        }
        if mask.len() != tp.len() {
            return Err(Error::shape("mse mask", &tp.shape, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("mse mask selects no entries"));
        }
        let mut acc = 0.0;
        for ((&p, &t), &m) in tp.data.iter().zip(&target.data).zip(mask) {
            if m {
                acc += (p - t) * (p - t);
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(acc / count as f64),
            Op::Mse {
                pred,
                target: target.data.clone(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`; gradients are added into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, params)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut ParamSet) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = params.get_mut(*id);
                if p.grad.len() != g.len() {
                    return Err(Error::shape("param grad", &[p.grad.len()], &[g.len()]));
                }
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &|s| matmul_nt_acc(g, &tb.data, s, m, n, k));
                acc(*b, &|s| matmul_tn_acc(&ta.data, g, s, m, k, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (bsz, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let n = node.value.shape[2];
                acc(*a, &|s| {
                    for i in 0..bsz {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data[i * k * n..(i + 1) * k * n];
                        let si = &mut s[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // B stored n×k: dA = G B
                            matmul_acc(gi, bi, si, m, n, k);
                        } else {
                            matmul_nt_acc(gi, bi, si, m, n, k);
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..bsz {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n×k) = Gᵀ A
                            matmul_tn_acc(gi, ai, si, m, n, k);
                        } else {
                            matmul_tn_acc(ai, gi, si, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(&tb.data) {
                        *x += y * z;
                    }
                });
                acc(*b, &|s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += y * z;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|s| add_into(s, g));
                let n = val(*bias).len();
                acc(*bias, &|s| {
                    for row in g.chunks(n.max(1)) {
                        add_into(s, row);
                    }
                });
            }
            Op::AddConst(x) => acc(*x, &|s| add_into(s, g)),
            Op::MulRows(x, f) => {
                let (tx, tf) = (val(*x), val(*f));
                let k = tx.row_len().max(1);
                acc(*x, &|s| {
                    for (r, (srow, grow)) in s.chunks_mut(k).zip(g.chunks(k)).enumerate() {
                        let c = tf.data[r];
                        srow.iter_mut().zip(grow).for_each(|(a, b)| *a += b * c);
                    }
                });
                acc(*f, &|s| {
                    for (r, (xrow, grow)) in tx.data.chunks(k).zip(g.chunks(k)).enumerate() {
                        s[r] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)),
            Op::Concat { parts, axis } => {
                let shape = &node.value.shape;
                let (outer, total, inner) = split(shape, *axis);
                let mut off = 0;
                for &p in parts {
                    let len = val(p).shape[*axis];
                    acc(p, &|s| {
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split(&val(*x).shape, *axis);
                let len = node.value.shape[*axis];
                acc(*x, &|s| {
                    for o in 0..outer {
                        let b = o * full * inner + start * inner;
                        add_into(&mut s[b..b + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Transpose(x) => {
                let sh = &node.value.shape;
                let r = sh.len();
                let (m, n) = (sh[r - 2], sh[r - 1]);
                let batch: usize = sh[..r - 2].iter().product();
                acc(*x, &|s| {
                    for b in 0..batch {
                        let gb = &g[b * m * n..(b + 1) * m * n];
                        let sb = &mut s[b * m * n..(b + 1) * m * n];
                        for i in 0..m {
                            for j in 0..n {
                                sb[j * m + i] += gb[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Relu(x) => {
                let tx = val(*x);
                acc(*x, &|s| {
                    for ((a, b), v) in s.iter_mut().zip(g).zip(&tx.data) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let tx = val(*x);
                acc(*x, &|s| {
                    for ((a, b), v) in s.iter_mut().zip(g).zip(&tx.data) {
                        *a += if *v > 0.0 { *b } else { b * slope };
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split(&y.shape, *axis);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| y.data[at(k)] * g[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += y.data[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::AttentionWeights { q, k, scale, causal } => {
                let a = &node.value;
                let (qt, kt) = (val(*q), val(*k));
                let (bsz, w, d) = (qt.shape[0], qt.shape[1], qt.shape[2]);
                // dS = A ⊙ (G − rowsum(G ⊙ A)) over allowed keys
                let mut ds = vec![0.0; bsz * w * w];
                for r in 0..bsz * w {
                    let keys = key_range(r % w, w, *causal);
                    let (ar, gr) = (&a.data[r * w..r * w + keys], &g[r * w..r * w + keys]);
                    let dot: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..keys {
                        ds[r * w + j] = scale * ar[j] * (gr[j] - dot);
                    }
                }
                acc(*q, &|s| {
                    for b in 0..bsz {
                        for i in 0..w {
                            let si = &mut s[(b * w + i) * d..(b * w + i + 1) * d];
                            for j in 0..key_range(i, w, *causal) {
                                let c = ds[(b * w + i) * w + j];
                                let kj = &kt.data[(b * w + j) * d..(b * w + j + 1) * d];
                                si.iter_mut().zip(kj).for_each(|(o, v)| *o += c * v);
                            }
                        }
                    }
                });
                acc(*k, &|s| {
                    for b in 0..bsz {
                        for i in 0..w {
                            let qi = &qt.data[(b * w + i) * d..(b * w + i + 1) * d];
                            for j in 0..key_range(i, w, *causal) {
                                let c = ds[(b * w + i) * w + j];
                                let sj = &mut s[(b * w + j) * d..(b * w + j + 1) * d];
                                sj.iter_mut().zip(qi).for_each(|(o, v)| *o += c * v);
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &|s| {
                for ((a, b), m) in s.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }),
            Op::Gather { x, idx } => {
                let k = val(*x).row_len();
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * k..(i + 1) * k], &g[r * k..(r + 1) * k]);
                    }
                });
            }
            Op::ScatterAdd { x, idx } => {
                let k = val(*x).row_len();
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[r * k..(r + 1) * k], &g[i * k..(i + 1) * k]);
                    }
                });
            }
            Op::SegmentSoftmax { x, seg } => {
                let y = &node.value.data;
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for ((&yv, &gv), &sg) in y.iter().zip(g).zip(seg) {
                    dot[sg] += yv * gv;
                }
                acc(*x, &|s| {
                    for (k, a) in s.iter_mut().enumerate() {
                        *a += y[k] * (g[k] - dot[seg[k]]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let tp = val(*pred);
                let c = 2.0 * g[0] / *count as f64;
                acc(*pred, &|s| {
                    for k in 0..s.len() {
                        if mask[k] {
                            s[k] += c * (tp.data[k] - target[k]);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Name of the operation that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> alloc::string::String {
        let s = match &self.nodes[v.0].op {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::AddConst(..) => "add_const",
            Op::MulRows(..) => "mul_rows",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax { .. } => "softmax",
            Op::AttentionWeights { .. } => "attention_weights",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Sum(..) => "sum",
            Op::Mse { .. } => "mse",
        };
        s.to_string()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `out = A B`, A m×k, B k×n.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out += A B`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, (a, k, 1), (b, n, 1), out);
}

/// `out = A Bᵀ`, A m×k, B n×k.
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_nt_acc(a, b, out, m, k, n);
}

/// `out += A Bᵀ`, A m×k, B n×k.
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, (a, k, 1), (b, 1, k), out);
}

/// `out += Aᵀ B`, A m×k, B m×n, out k×n.
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, (a, 1, k), (b, n, 1), out);
}

/// `out += A B` for an `m×k` A and `k×n` B given as (data, row stride,
/// column stride); `out` is row-major `m×n`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |(d, rs, cs): (&[f64], usize, usize), r: usize, c: usize| {
        assert!((r - 1) * rs + (c - 1) * cs < d.len(), "gemm operand too short");
    };
    last(a, m, k);
    last(b, k, n);
    assert!(out.len() >= m * n, "gemm output too short");
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}
