//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended after their inputs, so walking the tape backwards is a
//! reverse topological order and each node is visited exactly once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{
    axpy, canonical_sum, dot, matmul_acc, matmul_nt_acc, matmul_nt_sparse_acc, matmul_tn_acc, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    AttnMix { probs: Var, values: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    L2Norm(Var),
    GatherRows { table: Var, index: Vec<usize> },
}

struct Node {
    op: Op,
    /// Empty for parameter nodes, whose value lives in the store.
    value: Tensor,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.push(Op::Param(id), Tensor::zeros(0, 0));
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::MatMulNt(a, b), out))
    }

    /// `x · w + b` with `w` of shape `in×out` and `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n), (br, bc)) = (self.shape(x), self.shape(w), self.shape(b));
        if k != k2 || br != 1 || bc != n {
            return Err(Error::shape(
                "linear",
                format!("x {m}x{k}, w {k2}x{n}, b {br}x{bc}"),
            ));
        }
        let mut out = Tensor::zeros(m, n);
        {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_vec(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds the `1×n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let ((_, n), (rr, rc)) = (self.shape(a), self.shape(r));
        if rr != 1 || rc != n {
            return Err(Error::shape("add_row", format!("{:?} + {rr}x{rc}", self.shape(a))));
        }
        let mut out = self.value(a).clone();
        let row = self.value(r).data();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, v) in chunk.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddRow(a, r), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |v| v * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(a, slope), out)
    }

    /// Row-wise softmax. The normalizer is summed in sorted order, so each
    /// row's result is independent of column order.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(m, n);
        let mut scratch = Vec::with_capacity(n);
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scratch.clear();
            scratch.extend(row.iter().map(|v| (v - max).exp()));
            let exps: Vec<f64> = scratch.clone();
            let z = canonical_sum(&mut scratch);
            for (o, e) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&exps) {
                *o = e / z;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// `probs · values` where every output entry sums its terms in sorted
    /// order. Permuting the rows of `values` together with the columns of
    /// `probs` leaves the result bitwise unchanged.
    pub fn attn_mix(&mut self, probs: Var, values: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(probs), self.shape(values));
        if k != k2 {
            return Err(Error::shape("attn_mix", format!("{m}x{k} · {k2}x{n}")));
        }
        let (p, v) = (self.value(probs), self.value(values));
        let mut out = Tensor::zeros(m, n);
        let mut terms = vec![0.0; k];
        for i in 0..m {
            let p_row = p.row(i);
            for j in 0..n {
                for (t, (pr, s)) in terms.iter_mut().zip(p_row.iter().zip(0..k)) {
                    *t = pr * v.at(s, j);
                }
                out.data_mut()[i * n + j] = canonical_sum(&mut terms);
            }
        }
        Ok(self.push(Op::AttnMix { probs, values }, out))
    }

    /// Per-row layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::shape("layer_norm", format!("{m}x{n} with gain {:?}", self.shape(gain))));
        }
        let (xv, g, b) = (self.value(x), self.value(gain).data(), self.value(bias).data());
        let mut out = Tensor::zeros(m, n);
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, o) in out.data_mut()[i * n..(i + 1) * n].iter_mut().enumerate() {
                *o = (row[j] - mean) * inv * g[j] + b[j];
            }
            stats.push((mean, inv));
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, stats }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut offset = 0;
            for &p in parts {
                let row = self.value(p).row(i);
                out.data_mut()[i * n + offset..i * n + offset + row.len()].copy_from_slice(row);
                offset += row.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(m, len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(len, n, data)?;
        Ok(self.push(Op::SliceRows { x, start }, out))
    }

    /// Column-wise maximum over rows, `m×n → 1×n`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m == 0 {
            return Err(Error::shape("max_rows", "no rows"));
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; n];
        let mut best = xv.row(0).to_vec();
        for i in 1..m {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::from_vec(1, n, best)?;
        Ok(self.push(Op::MaxRows { x, argmax }, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * v);
        self.push(Op::Square(x), out)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::abs);
        self.push(Op::Abs(x), out)
    }

    /// Frobenius norm, a `1×1` result.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::L2Norm(x), Tensor::scalar(s))
    }

    /// Selects rows of `table` by index (an embedding lookup, or a one-hot
    /// product without materializing the one-hot matrix).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_vec(index.len(), n, data)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            out,
        ))
    }

    /// Hash of every branch decision taken by non-smooth ops (leaky ReLU
    /// and abs sign patterns, max-pool winners). Two evaluations with the
    /// same signature lie in the same smooth piece of the function.
    pub fn nonsmooth_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxRows { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (self.shape(*a), self.shape(*b));
                    if self.needs_grad(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        matmul_nt_acc(&g, self.value(*b).data(), ga, m, n, k);
                    }
                    if self.needs_grad(*b) {
                        let av = self.value(*a).data();
                        let gb = self.grad_buf(&mut grads, *b);
                        matmul_tn_acc(av, &g, gb, m, k, n);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let ((m, k), (n, _)) = (self.shape(*a), self.shape(*b));
                    if self.needs_grad(*a) {
                        let bv = self.value(*b).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        matmul_acc(&g, bv, ga, m, n, k);
                    }
                    if self.needs_grad(*b) {
                        let av = self.value(*a).data();
                        let gb = self.grad_buf(&mut grads, *b);
                        matmul_tn_acc(&g, av, gb, m, n, k);
                    }
                }
                Op::Linear { x, w, b } => {
                    let ((m, k), (_, n)) = (self.shape(*x), self.shape(*w));
                    if self.needs_grad(*x) {
                        let wv = self.value(*w).data();
                        let gx = self.grad_buf(&mut grads, *x);
                        matmul_nt_sparse_acc(&g, wv, gx, m, k, n);
                    }
                    if self.needs_grad(*w) {
                        let xv = self.value(*x).data();
                        let gw = self.grad_buf(&mut grads, *w);
                        matmul_tn_acc(xv, &g, gw, m, k, n);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        for row in g.chunks_exact(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs_grad(v) {
                            axpy(1.0, &g, self.grad_buf(&mut grads, v));
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs_grad(*a) {
                        axpy(1.0, &g, self.grad_buf(&mut grads, *a));
                    }
                    if self.needs_grad(*r) {
                        let n = self.shape(*r).1;
                        let gr = self.grad_buf(&mut grads, *r);
                        for row in g.chunks_exact(n) {
                            for (o, v) in gr.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(*a) {
                        axpy(1.0, &g, self.grad_buf(&mut grads, *a));
                    }
                    if self.needs_grad(*b) {
                        axpy(-1.0, &g, self.grad_buf(&mut grads, *b));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let bv = self.value(*b).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    }
                    if self.needs_grad(*b) {
                        let av = self.value(*a).data();
                        let gb = self.grad_buf(&mut grads, *b);
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gv * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs_grad(*a) {
                        axpy(*c, &g, self.grad_buf(&mut grads, *a));
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.needs_grad(*a) {
                        let xv = self.value(*a).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        for ((o, gv), x) in ga.iter_mut().zip(&g).zip(xv) {
                            *o += if *x > 0.0 { *gv } else { slope * gv };
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs_grad(*a) {
                        let y = &node.value;
                        let n = y.cols();
                        let ga = self.grad_buf(&mut grads, *a);
                        for i in 0..y.rows() {
                            let yr = y.row(i);
                            let gr = &g[i * n..(i + 1) * n];
                            let s = dot(gr, yr);
                            for j in 0..n {
                                ga[i * n + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::AttnMix { probs, values } => {
                    let ((m, k), (_, n)) = (self.shape(*probs), self.shape(*values));
                    if self.needs_grad(*probs) {
                        let vv = self.value(*values).data();
                        let gp = self.grad_buf(&mut grads, *probs);
                        matmul_nt_acc(&g, vv, gp, m, n, k);
                    }
                    if self.needs_grad(*values) {
                        let pv = self.value(*probs).data();
                        let gv = self.grad_buf(&mut grads, *values);
                        matmul_tn_acc(pv, &g, gv, m, k, n);
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let (m, n) = self.shape(*x);
                    let xv = self.value(*x);
                    let gain_v = self.value(*gain).data();
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    let mut d_gain = vec![0.0; n];
                    let mut d_bias = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let (mean, inv) = stats[i];
                        let gr = &g[i * n..(i + 1) * n];
                        for j in 0..n {
                            xhat[j] = (xv.at(i, j) - mean) * inv;
                            dxhat[j] = gr[j] * gain_v[j];
                            d_gain[j] += gr[j] * xhat[j];
                            d_bias[j] += gr[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = inv / n as f64 * (n as f64 * dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                    if self.needs_grad(*x) {
                        axpy(1.0, &dx, self.grad_buf(&mut grads, *x));
                    }
                    if self.needs_grad(*gain) {
                        axpy(1.0, &d_gain, self.grad_buf(&mut grads, *gain));
                    }
                    if self.needs_grad(*bias) {
                        axpy(1.0, &d_bias, self.grad_buf(&mut grads, *bias));
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (m, w) = self.shape(p);
                        if self.needs_grad(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for i in 0..m {
                                axpy(1.0, &g[i * n + offset..i * n + offset + w], &mut gp[i * w..(i + 1) * w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs_grad(p) {
                            axpy(1.0, &g[offset..offset + len], self.grad_buf(&mut grads, p));
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.needs_grad(*x) {
                        let (m, len) = node.value.shape();
                        let n = self.shape(*x).1;
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..m {
                            axpy(1.0, &g[i * len..(i + 1) * len], &mut gx[i * n + start..i * n + start + len]);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.needs_grad(*x) {
                        let n = self.shape(*x).1;
                        let gx = self.grad_buf(&mut grads, *x);
                        axpy(1.0, &g, &mut gx[start * n..start * n + g.len()]);
                    }
                }
                Op::MaxRows { x, argmax } => {
                    if self.needs_grad(*x) {
                        let n = self.shape(*x).1;
                        let gx = self.grad_buf(&mut grads, *x);
                        for (j, &i) in argmax.iter().enumerate() {
                            gx[i * n + j] += g[j];
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs_grad(*x) {
                        for o in self.grad_buf(&mut grads, *x) {
                            *o += g[0];
                        }
                    }
                }
                Op::Mean(x) => {
                    if self.needs_grad(*x) {
                        let scale = g[0] / self.value(*x).len().max(1) as f64;
                        for o in self.grad_buf(&mut grads, *x) {
                            *o += scale;
                        }
                    }
                }
                Op::Square(x) => {
                    if self.needs_grad(*x) {
                        let xv = self.value(*x).data();
                        let gx = self.grad_buf(&mut grads, *x);
                        for ((o, gv), v) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += 2.0 * v * gv;
                        }
                    }
                }
                Op::Abs(x) => {
                    if self.needs_grad(*x) {
                        let xv = self.value(*x).data();
                        let gx = self.grad_buf(&mut grads, *x);
                        for ((o, gv), v) in gx.iter_mut().zip(&g).zip(xv) {
                            // Subgradient 0 at the kink.
                            if *v > 0.0 {
                                *o += gv;
                            } else if *v < 0.0 {
                                *o -= gv;
                            }
                        }
                    }
                }
                Op::L2Norm(x) => {
                    if self.needs_grad(*x) {
                        let norm = node.value.data()[0];
                        if norm > 0.0 {
                            let xv = self.value(*x).data();
                            axpy(g[0] / norm, xv, self.grad_buf(&mut grads, *x));
                        }
                    }
                }
                Op::GatherRows { table, index } => {
                    if self.needs_grad(*table) {
                        let n = self.shape(*table).1;
                        let gt = self.grad_buf(&mut grads, *table);
                        for (r, &i) in index.iter().enumerate() {
                            axpy(1.0, &g[r * n..(r + 1) * n], &mut gt[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in values {
            s.add(name, t.clone()).unwrap();
        }
        s
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(1, 3));
        let s = g.softmax_rows(x);
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let neg = g.input(Tensor::scalar(-1.0));
        let l = g.leaky_relu(neg, 0.01);
        assert_eq!(g.value(l).data(), &[-0.01]);

        let a = random(3, 4, 1);
        let i = g.input(Tensor::identity(3));
        let av = g.input(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);

        let logits = g.input(random(4, 6, 2));
        let sm = g.softmax_rows(logits);
        for r in 0..4 {
            let total: f64 = g.value(sm).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(matches!(g.matmul(av, av), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn square_gradient() {
        let store = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ParamId::from_index(0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(ParamId::from_index(0)).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = store_with(&[("x", Tensor::zeros(2, 2))]);
        let mut g = Graph::new(&store);
        let x = g.param(ParamId::from_index(0));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        // d(-log p_t)/dz = -(1/p_t) dp_t/dz, which must equal p - onehot.
        let k = 5;
        let store = store_with(&[("z", Tensor::zeros(1, k))]);
        let target = 2;
        let mut g = Graph::new(&store);
        let z = g.param(ParamId::from_index(0));
        let p = g.softmax_rows(z);
        let mut mask = Tensor::zeros(1, k);
        mask.data_mut()[target] = 1.0;
        let m = g.input(mask);
        let picked = g.mul(p, m).unwrap();
        let pt = g.sum(picked);
        let grads = g.backward(pt).unwrap();
        let dp_t = grads.get(ParamId::from_index(0)).unwrap().data().to_vec();
        let p_t = 1.0 / k as f64;
        for (j, d) in dp_t.iter().enumerate() {
            let ce_grad = -d / p_t;
            let expected = p_t - if j == target { 1.0 } else { 0.0 };
            assert!((ce_grad - expected).abs() < 1e-12, "{j}: {ce_grad} vs {expected}");
        }
    }

    /// Central finite differences over every parameter entry.
    fn check_gradients(store: &ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (id, t) in store.iter() {
            for e in 0..t.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[e] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[e] -= h;
                let f = |s: &ParamStore| {
                    let mut g = Graph::new(s);
                    let l = build(&mut g);
                    g.value(l).data()[0]
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.get(id).map_or(0.0, |t| t.data()[e]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{e}]: fd {fd} vs analytic {an}", store.name(id));
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        // 3-layer MLP, 2 -> 3 -> 2 -> 1 plus biases: 20 parameters.
        let store = store_with(&[
            ("w1", random(2, 3, 10)),
            ("b1", random(1, 3, 11)),
            ("w2", random(3, 2, 12)),
            ("b2", random(1, 2, 13)),
            ("w3", random(2, 1, 14)),
            ("b3", random(1, 1, 15)),
        ]);
        assert_eq!(store.iter().map(|(_, t)| t.len()).sum::<usize>(), 20);
        let input = random(4, 2, 16);
        check_gradients(&store, |g| {
            let x = g.input(input.clone());
            let mut h = x;
            for layer in 0..3 {
                let w = g.param(ParamId::from_index(2 * layer));
                let b = g.param(ParamId::from_index(2 * layer + 1));
                h = g.linear(h, w, b).unwrap();
                if layer < 2 {
                    h = g.leaky_relu(h, 0.1);
                }
            }
            let sq = g.square(h);
            g.mean(sq)
        });
    }

    #[test]
    fn composite_ops_gradients_match_finite_differences() {
        let store = store_with(&[
            ("q", random(4, 6, 20)),
            ("k", random(4, 6, 21)),
            ("v", random(4, 6, 22)),
            ("gain", random(1, 6, 23)),
            ("bias", random(1, 6, 24)),
            ("emb", random(3, 6, 25)),
        ]);
        let id = ParamId::from_index;
        check_gradients(&store, |g| {
            let q = g.param(id(0));
            let k = g.param(id(1));
            let v = g.param(id(2));
            let scores = g.matmul_nt(q, k).unwrap();
            let scores = g.scale(scores, 0.5);
            let p = g.softmax_rows(scores);
            let mixed = g.attn_mix(p, v).unwrap();
            let gain = g.param(id(3));
            let bias = g.param(id(4));
            let normed = g.layer_norm(mixed, gain, bias, 1e-5).unwrap();
            let emb = g.param(id(5));
            let rows = g.gather_rows(emb, &[2, 0, 2, 1]).unwrap();
            let mixed2 = g.mul(normed, rows).unwrap();
            let left = g.slice_cols(mixed2, 0, 3).unwrap();
            let right = g.slice_cols(mixed2, 3, 3).unwrap();
            let cat = g.concat_rows(&[left, right]).unwrap();
            let top = g.slice_rows(cat, 1, 5).unwrap();
            let pooled = g.max_rows(top).unwrap();
            let shifted = g.add_row(top, pooled).unwrap();
            let wide = g.concat_cols(&[shifted, top]).unwrap();
            let a = g.abs(wide);
            let s1 = g.sum(a);
            let n = g.l2_norm(mixed2);
            let tot = g.add(s1, n).unwrap();
            let diff = g.sub(tot, n).unwrap();
            g.add(diff, n).unwrap()
        });
    }

    #[test]
    fn attention_mix_is_order_independent() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = random(5, 5, 30);
        let values = random(5, 7, 31);
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor| {
            Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let permute_both = |t: &Tensor| {
            Tensor::from_rows(
                &perm
                    .iter()
                    .map(|&i| perm.iter().map(|&j| t.at(i, j)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let l = g.input(logits.clone());
        let p = g.softmax_rows(l);
        let v = g.input(values.clone());
        let out = g.attn_mix(p, v).unwrap();
        let lp = g.input(permute_both(&logits));
        let pp = g.softmax_rows(lp);
        let vp = g.input(permute_rows(&values));
        let outp = g.attn_mix(pp, vp).unwrap();
        let expected = permute_rows(g.value(out));
        assert_eq!(g.value(outp), &expected);
    }
}
