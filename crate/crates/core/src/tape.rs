//! Reverse-mode automatic differentiation over whole-tensor operations.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and returns the gradients of every named leaf.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, MatView, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Large negative fill used in place of `-inf` so values stay finite.
pub const NEG_FILL: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `a[m, n] * v[n]` broadcast over rows.
    MulRow { a: Var, v: Var },
    /// `a[m, n] * c[m, 1]` broadcast over columns.
    MulCol { a: Var, c: Var },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedFill { a: Var, mask: Vec<bool> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    GatherElements { a: Var, idx: Vec<usize>, k: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    L2NormAxis { a: Var, axis: usize },
    RmsNorm { x: Var, g: Var, inv_rms: Vec<f64> },
    Rope { a: Var, n_heads: usize, d_head: usize, seq_len: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<f64> },
}

/// Shape of a fused causal grouped-query attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnGeom {
    pub seq_len: usize,
    pub n_head_q: usize,
    pub n_head_kv: usize,
    pub d_head: usize,
}

impl AttnGeom {
    pub fn group_size(&self) -> usize {
        self.n_head_q / self.n_head_kv
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of named leaves, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, name: Some(name.into()) });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, name: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: kind, requires_grad, name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `op(a) @ op(b)`, where `op` optionally transposes a stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatView::new(self.value(a).data(), ac, ta),
            MatView::new(self.value(b).data(), bc, tb),
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, &[self.shape(a), self.shape(b)]));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(op, value, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(v).numel() != n {
            return Err(mismatch("mul_row", &[self.shape(a), self.shape(v)]));
        }
        let vv = self.value(v).data();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(av[i * n..(i + 1) * n].iter().zip(vv).map(|(x, y)| x * y));
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow { a, v }, &[a, v])
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(c).numel() != m {
            return Err(mismatch("mul_col", &[self.shape(a), self.shape(c)]));
        }
        let cv = self.value(c).data();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(av[i * n..(i + 1) * n].iter().map(|x| x * cv[i]));
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul_col", value, Op::MulCol { a, c }, &[a, c])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| tensor::gelu(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax(self.value(a));
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = tensor::log_softmax(self.value(a))?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Replace entries where `mask` is true by [`NEG_FILL`].
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(mismatch("masked_fill", &[self.shape(a), &[mask.len()]]));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| if m { NEG_FILL } else { x }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("masked_fill", value, Op::MaskedFill { a, mask }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(mismatch("concat_cols", &shapes));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(mismatch("slice_cols", &[self.shape(a), &[start, end]]));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.value(a).row(i)[start..end]);
        }
        let value = Tensor::new(vec![m, end - start], data)?;
        self.push("slice_cols", value, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(mismatch("concat_rows", &shapes));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n.max(1);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > m {
            return Err(mismatch("slice_rows", &[self.shape(a), &[start, end]]));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        self.push("slice_rows", value, Op::SliceRows { a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = self.dims(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange { what: "gather_rows", index: bad, limit: m });
        }
        let value = self.value(a).select_rows(idx);
        self.push("gather_rows", value, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Sum rows of `a` into an `n_rows`-row matrix at positions `idx`.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m {
            return Err(mismatch("scatter_rows", &[self.shape(a), &[idx.len()]]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::IndexOutOfRange { what: "scatter_rows", index: bad, limit: n_rows });
        }
        let mut data = vec![0.0; n_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in data[i * n..(i + 1) * n].iter_mut().zip(self.value(a).row(r)) {
                *o += x;
            }
        }
        let value = Tensor::new(vec![n_rows, n], data)?;
        self.push("scatter_rows", value, Op::ScatterRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Per-row column gather: `out[i, j] = a[i, idx[i * k + j]]`.
    pub fn gather_elements(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m * k {
            return Err(mismatch("gather_elements", &[self.shape(a), &[idx.len()]]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange { what: "gather_elements", index: bad, limit: n });
        }
        let av = self.value(a).data();
        let data = idx.iter().enumerate().map(|(p, &j)| av[(p / k) * n + j]).collect();
        let value = Tensor::new(vec![m, k], data)?;
        self.push("gather_elements", value, Op::GatherElements { a, idx: idx.to_vec(), k }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, f: impl Fn(&mut f64, f64)) -> Result<Tensor> {
        let (m, n) = self.dims(a);
        let av = self.value(a).data();
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, &x) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                        f(o, x);
                    }
                }
                Tensor::new(vec![1, n], out)
            }
            1 => {
                let mut out = vec![0.0; m];
                for (i, o) in out.iter_mut().enumerate() {
                    for &x in &av[i * n..(i + 1) * n] {
                        f(o, x);
                    }
                }
                Tensor::new(vec![m, 1], out)
            }
            _ => Err(mismatch("reduce_axis", &[self.shape(a), &[axis]])),
        }
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, |o, x| *o += x)?;
        self.push("sum_axis", value, Op::SumAxis { a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let count = if axis == 0 { m } else { n } as f64;
        let mut value = self.reduce_axis(a, axis, |o, x| *o += x)?;
        value.data_mut().iter_mut().for_each(|v| *v /= count);
        self.push("mean_axis", value, Op::MeanAxis { a, axis }, &[a])
    }

    pub fn l2_norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut value = self.reduce_axis(a, axis, |o, x| *o += x * x)?;
        value.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
        self.push("l2_norm_axis", value, Op::L2NormAxis { a, axis }, &[a])
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(g).numel() != n {
            return Err(mismatch("rms_norm", &[self.shape(x), self.shape(g)]));
        }
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let mut inv_rms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(gv).map(|(v, w)| v * r * w));
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push("rms_norm", value, Op::RmsNorm { x, g, inv_rms }, &[x, g])
    }

    /// Rotary position encoding on `n_heads` heads of width `d_head`; the
    /// position of row `i` is `i % seq_len`.
    pub fn rope(&mut self, a: Var, n_heads: usize, d_head: usize, seq_len: usize, base: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n != n_heads * d_head || !d_head.is_multiple_of(2) || seq_len == 0 {
            return Err(mismatch("rope", &[self.shape(a), &[n_heads, d_head]]));
        }
        let mut data = self.value(a).data().to_vec();
        rope_apply(&mut data, m, n_heads, d_head, seq_len, base, 1.0);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("rope", value, Op::Rope { a, n_heads, d_head, seq_len, base }, &[a])
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    ///
    /// Rows are consecutive sequences of `geom.seq_len` tokens; query head
    /// `h` reads key/value head `h / group_size`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom) -> Result<Var> {
        let (nq_rows, qc) = self.dims(q);
        let (nk_rows, kc) = self.dims(k);
        let dh = geom.d_head;
        let bad = geom.n_head_kv == 0
            || !geom.n_head_q.is_multiple_of(geom.n_head_kv)
            || qc != geom.n_head_q * dh
            || kc != geom.n_head_kv * dh
            || self.dims(v) != (nk_rows, kc)
            || nq_rows != nk_rows
            || geom.seq_len == 0
            || nq_rows % geom.seq_len != 0;
        if bad {
            return Err(mismatch("causal_attention", &[self.shape(q), self.shape(k), self.shape(v)]));
        }
        let l = geom.seq_len;
        let n_seq = nq_rows / l;
        let gs = geom.group_size();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq_rows * qc];
        let mut probs = vec![0.0; n_seq * geom.n_head_q * l * l];
        let mut scores = vec![0.0; l];
        for s in 0..n_seq {
            for h in 0..geom.n_head_q {
                let g = h / gs;
                let pbase = (s * geom.n_head_q + h) * l * l;
                for i in 0..l {
                    let qi = &qv[(s * l + i) * qc + h * dh..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv[(s * l + j) * kc + g * dh..][..dh];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = &mut probs[pbase + i * l..pbase + i * l + i + 1];
                    tensor::softmax_row(&scores[..i + 1], p);
                    let o = &mut out[(s * l + i) * qc + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(s * l + j) * kc + g * dh..][..dh];
                        for (oo, x) in o.iter_mut().zip(vj) {
                            *oo += pj * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq_rows, qc], out)?;
        self.push("causal_attention", value, Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    ///
    /// Every named trainable leaf gets a gradient, zero when unreachable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.name) {
                let g = match grads[i].take() {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                match out.by_name.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulate a contribution into the gradient slot of `v`.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = val(*a).dims2();
                let (br, bc) = val(*b).dims2();
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                if wants(*a) {
                    // d op(A) = G @ op(B)^T, written through A's own strides.
                    let bd = val(*b).data().to_vec();
                    let ga = slot(grads, nodes, *a);
                    let (rs, cs) = if *ta { (1, ac as isize) } else { (ac as isize, 1) };
                    gemm(m, n, k, 1.0, MatView::new(g, n, false), MatView::new(&bd, bc, !*tb), 1.0, ga, rs, cs);
                }
                if wants(*b) {
                    let ad = val(*a).data().to_vec();
                    let gb = slot(grads, nodes, *b);
                    let (rs, cs) = if *tb { (1, bc as isize) } else { (bc as isize, 1) };
                    gemm(k, m, n, 1.0, MatView::new(&ad, ac, !*ta), MatView::new(g, n, false), 1.0, gb, rs, cs);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if wants(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let s = slot(grads, nodes, *a);
                    for ((o, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let s = slot(grads, nodes, *b);
                    for ((o, x), y) in s.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, x)| *o += x * c);
            }
            Op::AddScalar(a) => {
                slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::MulRow { a, v } => {
                let (m, n) = val(*a).dims2();
                let (av, vv) = (val(*a).data(), val(*v).data());
                if wants(*a) {
                    let s = slot(grads, nodes, *a);
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[i * n + j] * vv[j];
                        }
                    }
                }
                if wants(*v) {
                    let s = slot(grads, nodes, *v);
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::MulCol { a, c } => {
                let (m, n) = val(*a).dims2();
                let (av, cv) = (val(*a).data(), val(*c).data());
                if wants(*a) {
                    let s = slot(grads, nodes, *a);
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[i * n + j] * cv[i];
                        }
                    }
                }
                if wants(*c) {
                    let s = slot(grads, nodes, *c);
                    for i in 0..m {
                        s[i] += (0..n).map(|j| g[i * n + j] * av[i * n + j]).sum::<f64>();
                    }
                }
            }
            Op::Gelu(a) => {
                let av = val(*a).data();
                let s = slot(grads, nodes, *a);
                for ((o, x), &y) in s.iter_mut().zip(g).zip(av) {
                    *o += x * tensor::gelu_grad(y);
                }
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims2();
                let p = out.data();
                let s = slot(grads, nodes, *a);
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&p[r.clone()]).map(|(x, y)| x * y).sum();
                    for j in r {
                        s[j] += p[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (m, n) = out.dims2();
                let ls = out.data();
                let s = slot(grads, nodes, *a);
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let gsum: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        s[j] += g[j] - ls[j].exp() * gsum;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let s = slot(grads, nodes, *a);
                for ((o, x), &m) in s.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        let s = slot(grads, nodes, p);
                        for i in 0..m {
                            for j in 0..pc {
                                s[i * pc + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, w) = out.dims2();
                let n = val(*a).cols();
                let s = slot(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..w {
                        s[i * n + start + j] += g[i * w + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        slot(grads, nodes, p).iter_mut().zip(&g[off..off + len]).for_each(|(o, x)| *o += x);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let n = val(*a).cols();
                let s = slot(grads, nodes, *a);
                s[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::GatherRows { a, idx } => {
                let n = val(*a).cols();
                let s = slot(grads, nodes, *a);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        s[i * n + j] += g[r * n + j];
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let n = val(*a).cols();
                let s = slot(grads, nodes, *a);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        s[r * n + j] += g[i * n + j];
                    }
                }
            }
            Op::GatherElements { a, idx, k } => {
                let n = val(*a).cols();
                let s = slot(grads, nodes, *a);
                for (p, &j) in idx.iter().enumerate() {
                    s[(p / k) * n + j] += g[p];
                }
            }
            Op::Sum(a) => {
                slot(grads, nodes, *a).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let c = g[0] / val(*a).numel() as f64;
                slot(grads, nodes, *a).iter_mut().for_each(|o| *o += c);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (m, n) = val(*a).dims2();
                let mean = matches!(nodes[idx].op, Op::MeanAxis { .. });
                let count = if !mean { 1.0 } else if *axis == 0 { m as f64 } else { n as f64 };
                let s = slot(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        let gi = if *axis == 0 { g[j] } else { g[i] };
                        s[i * n + j] += gi / count;
                    }
                }
            }
            Op::L2NormAxis { a, axis } => {
                let (m, n) = val(*a).dims2();
                let av = val(*a).data();
                let norms = out.data();
                let s = slot(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        let o = if *axis == 0 { j } else { i };
                        if norms[o] > 0.0 {
                            s[i * n + j] += g[o] * av[i * n + j] / norms[o];
                        }
                    }
                }
            }
            Op::RmsNorm { x, g: gain, inv_rms } => {
                let (m, n) = val(*x).dims2();
                let (xv, gv) = (val(*x).data(), val(*gain).data());
                if wants(*x) {
                    let s = slot(grads, nodes, *x);
                    for i in 0..m {
                        let r = inv_rms[i];
                        let row = i * n..(i + 1) * n;
                        let dot: f64 = row.clone().map(|p| g[p] * gv[p - i * n] * xv[p]).sum();
                        let c = r * r * r * dot / n as f64;
                        for p in row {
                            s[p] += r * gv[p - i * n] * g[p] - c * xv[p];
                        }
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, nodes, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += g[i * n + j] * xv[i * n + j] * inv_rms[i];
                        }
                    }
                }
            }
            Op::Rope { a, n_heads, d_head, seq_len, base } => {
                let (m, _) = out.dims2();
                let mut back = g.to_vec();
                rope_apply(&mut back, m, *n_heads, *d_head, *seq_len, *base, -1.0);
                slot(grads, nodes, *a).iter_mut().zip(&back).for_each(|(o, x)| *o += x);
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, geom, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (rows, qc) = nodes[q.0].value.dims2();
        let kc = nodes[k.0].value.cols();
        let (l, dh) = (geom.seq_len, geom.d_head);
        let gs = geom.group_size();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let mut dq = vec![0.0; rows * qc];
        let mut dk = vec![0.0; rows * kc];
        let mut dv = vec![0.0; rows * kc];
        let mut dp = vec![0.0; l];
        for s in 0..rows / l {
            for h in 0..geom.n_head_q {
                let grp = h / gs;
                let pbase = (s * geom.n_head_q + h) * l * l;
                for i in 0..l {
                    let go = &g[(s * l + i) * qc + h * dh..][..dh];
                    let p = &probs[pbase + i * l..pbase + i * l + i + 1];
                    for j in 0..=i {
                        let vrow = (s * l + j) * kc + grp * dh;
                        dp[j] = go.iter().zip(&vv[vrow..vrow + dh]).map(|(a, b)| a * b).sum();
                        for (d, x) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                            *d += p[j] * x;
                        }
                    }
                    let dot: f64 = (0..=i).map(|j| dp[j] * p[j]).sum();
                    let qrow = (s * l + i) * qc + h * dh;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (s * l + j) * kc + grp * dh;
                        for t in 0..dh {
                            dq[qrow + t] += ds * kv[krow + t];
                            dk[krow + t] += ds * qv[qrow + t];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                let s = grads[var.0].get_or_insert_with(|| vec![0.0; d.len()]);
                s.iter_mut().zip(&d).for_each(|(o, x)| *o += x);
            }
        }
    }
}

/// Rotate consecutive pairs within each head; `sign = -1` applies the inverse.
fn rope_apply(data: &mut [f64], rows: usize, n_heads: usize, d_head: usize, seq_len: usize, base: f64, sign: f64) {
    let half = d_head / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-((2 * i) as f64) / d_head as f64)).collect();
    let width = n_heads * d_head;
    for r in 0..rows {
        let pos = (r % seq_len) as f64;
        for h in 0..n_heads {
            for (i, f) in freqs.iter().enumerate() {
                let (sin, cos) = (sign * pos * f).sin_cos();
                let p = r * width + h * d_head + 2 * i;
                let (x0, x1) = (data[p], data[p + 1]);
                data[p] = x0 * cos - x1 * sin;
                data[p + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Check every named gradient against central differences of `f`.
    fn check_fd(params: &[(&str, Tensor)], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let eval = |ps: &[(&str, Tensor)]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|(n, t)| tape.param(n, t.clone())).collect();
            let loss = f(&mut tape, &vars).unwrap();
            tape.scalar_value(loss)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(n, t)| tape.param(n, t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (pi, (name, t)) in params.iter().enumerate() {
            let g = grads.get(name).unwrap();
            for e in 0..t.numel() {
                let mut plus = params.to_vec();
                plus[pi].1.data_mut()[e] += h;
                let mut minus = params.to_vec();
                minus[pi].1.data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[e];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-3, "{name}[{e}]: analytic {an}, fd {fd}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_w() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(&[2], 1.0));
        let _b = tape.param("b", Tensor::full(&[3], 1.0));
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(&[2], 1.0));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
        assert!(matches!(tape.sum(a), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1], 1e308));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constant_only_graph_is_not_recorded_for_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let s = tape.sum(a).unwrap();
        assert!(!tape.requires_grad(s));
    }

    #[test]
    fn matmul_transposes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[5, 4]);
        let c = random(&mut rng, &[3, 5]);
        check_fd(&[("a", a), ("b", b), ("c", c)], |t, v| {
            let ab = t.matmul_t(v[0], v[1], false, true)?; // 3x5
            let x = t.matmul_t(v[2], ab, true, false)?; // 5x5
            let y = t.matmul_t(x, v[1], true, false)?; // 5x4
            let y = t.matmul_t(y, v[0], false, true)?; // 5x3
            let y = t.mul(y, y)?;
            t.sum(y)
        });
    }

    #[test]
    fn elementwise_and_reductions_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let v = random(&mut rng, &[4]);
        let c = random(&mut rng, &[3, 1]);
        check_fd(&[("a", a), ("b", b), ("v", v), ("c", c)], |t, x| {
            let s = t.sub(x[0], x[1])?;
            let g = t.gelu(s)?;
            let m = t.mul_row(g, x[2])?;
            let m = t.mul_col(m, x[3])?;
            let m = t.add_scalar(m, 0.3)?;
            let sm = t.softmax(m)?;
            let ls = t.log_softmax(x[0])?;
            let p = t.mul(sm, ls)?;
            let r0 = t.mean_axis(p, 0)?;
            let r1 = t.sum_axis(p, 1)?;
            let n0 = t.l2_norm_axis(x[1], 0)?;
            let n1 = t.l2_norm_axis(x[1], 1)?;
            let a0 = t.sum(r0)?;
            let a1 = t.mean(r1)?;
            let a2 = t.sum(n0)?;
            let a3 = t.sum(n1)?;
            let s1 = t.add(a0, a1)?;
            let s2 = t.add(a2, a3)?;
            let s2 = t.scale(s2, 0.5)?;
            t.add(s1, s2)
        });
    }

    #[test]
    fn structural_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[4, 2]);
        let w = random(&mut rng, &[4, 5]);
        check_fd(&[("a", a), ("b", b), ("w", w)], |t, x| {
            let cat = t.concat_cols(&[x[0], x[1]])?; // 4x5
            let s = t.slice_cols(cat, 1, 4)?; // 4x3
            let rows = t.concat_rows(&[s, x[0]])?; // 8x3
            let r = t.slice_rows(rows, 2, 7)?; // 5x3
            let gth = t.gather_rows(r, &[0, 4, 4, 1])?; // 4x3
            let sc = t.scatter_rows(gth, &[2, 0, 2, 5], 6)?; // 6x3
            let sc2 = t.gather_rows(sc, &[0, 1, 2, 3])?;
            let m = t.mul(sc2, x[0])?;
            let ge = t.gather_elements(x[2], &[0, 4, 1, 1, 3, 2, 4, 0], 2)?;
            let mf = t.masked_fill(x[2], vec![false, true, false, false, true].repeat(4))?;
            let sm = t.softmax(mf)?;
            let sq = t.mul(ge, ge)?;
            let l1 = t.sum(m)?;
            let l2 = t.sum(sq)?;
            let l3 = t.sum_axis(sm, 0)?;
            let l3 = t.slice_cols(l3, 0, 1)?;
            let l3 = t.sum(l3)?;
            let s = t.add(l1, l2)?;
            t.add(s, l3)
        });
    }

    #[test]
    fn rms_norm_and_rope_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[6, 4]);
        let g = random(&mut rng, &[4]);
        let w = random(&mut rng, &[6, 4]);
        check_fd(&[("x", x), ("g", g), ("w", w)], |t, v| {
            let n = t.rms_norm(v[0], v[1], 1e-6)?;
            let r = t.rope(n, 2, 2, 3, 10000.0)?;
            let m = t.mul(r, v[2])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
    }

    #[test]
    fn attention_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, &[6, 8]);
        let k = random(&mut rng, &[6, 4]);
        let v = random(&mut rng, &[6, 4]);
        let w = random(&mut rng, &[6, 8]);
        let geom = AttnGeom { seq_len: 3, n_head_q: 4, n_head_kv: 2, d_head: 2 };
        check_fd(&[("q", q), ("k", k), ("v", v), ("w", w)], |t, x| {
            let o = t.causal_attention(x[0], x[1], x[2], geom)?;
            let m = t.mul(o, x[3])?;
            t.sum(m)
        });
    }

    #[test]
    fn rope_is_an_isometry_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[5, 8]);
        let mut data = x.data().to_vec();
        rope_apply(&mut data, 5, 2, 4, 5, 10000.0, 1.0);
        for r in 0..5 {
            let n0: f64 = x.row(r).iter().map(|v| v * v).sum();
            let n1: f64 = data[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        rope_apply(&mut data, 5, 2, 4, 5, 10000.0, -1.0);
        let back = Tensor::new(vec![5, 8], data).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn softmax_of_log_softmax_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[4, 6]);
        let ls = tensor::log_softmax(&x).unwrap();
        let sm = tensor::softmax(&x);
        for (a, b) in ls.data().iter().zip(sm.data()) {
            assert!((a.exp() - b).abs() < 1e-10);
        }
    }

    #[test]
    fn same_inputs_same_gradients_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let a = random(&mut rng, &[16, 16]);
            let b = random(&mut rng, &[16, 16]);
            let mut t = Tape::new();
            let va = t.param("a", a);
            let vb = t.param("b", b);
            let m = t.matmul(va, vb).unwrap();
            let g = t.gelu(m).unwrap();
            let l = t.sum(g).unwrap();
            let grads = t.backward(l).unwrap();
            grads.get("a").unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
