//! Reverse-mode gradient tape over a fixed operation vocabulary.
//!
//! Every forward op appends a node holding its output and whatever it needs
//! for the backward pass. Node ids are assigned in execution order, so the
//! node list is already topologically sorted and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, mismatch, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, factor: f32 },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogNormalCdf(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Embed { table: Var, ids: Vec<usize> },
    LayerNorm { a: Var, inv_std: Vec<f32> },
    MeanLast(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Pick { a: Var, idx: Vec<usize> },
    Clamp { a: Var, lo: f32, hi: f32 },
    Minimum { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(mismatch(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch("matmul", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let out = gemm(self.value(a).data(), false, self.value(b).data(), trans_b, m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
        )
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> Option<bool> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Some(false)
        } else if sb.len() == 1 && sb[0] == self.value(a).last_dim() {
            Some(true)
        } else {
            None
        }
    }

    /// Elementwise sum; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let broadcast = self
            .broadcast_ok(a, b)
            .ok_or_else(|| mismatch("add", &[self.value(a).shape(), self.value(b).shape()]))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let d = av.last_dim();
        let data: Vec<f32> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { bv[i % d] } else { bv[i] })
            .collect();
        let shape = av.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add { a, b, broadcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("sub", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("sub", Tensor::from_parts(shape, data), Op::Sub { a, b })
    }

    /// Elementwise product; `b` may also be a vector broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let broadcast = self
            .broadcast_ok(a, b)
            .ok_or_else(|| mismatch("mul", &[self.value(a).shape(), self.value(b).shape()]))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let d = av.last_dim();
        let data: Vec<f32> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * if broadcast { bv[i % d] } else { bv[i] })
            .collect();
        let shape = av.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul { a, b, broadcast })
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var, TensorError> {
        let t = self.map(a, |x| x * factor);
        self.push("scale", t, Op::Scale { a, factor })
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(a);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, |x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32);
        self.push("sigmoid", t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, f32::tanh);
        self.push("tanh", t, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, f32::exp);
        self.push("exp", t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, f32::ln);
        self.push("log", t, Op::Log(a))
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, |x| {
            let x = x as f64;
            (x.max(0.0) + (-x.abs()).exp().ln_1p()) as f32
        });
        self.push("softplus", t, Op::Softplus(a))
    }

    /// `ln Φ(x)` for the standard normal CDF Φ.
    pub fn log_normal_cdf(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, |x| log_ndtr(x as f64) as f32);
        self.push("log_normal_cdf", t, Op::LogNormalCdf(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![0.0f32; v.len()];
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
            let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = ((x as f64 - max).exp() / sum) as f32;
            }
        }
        let shape = v.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::SoftmaxLast(a))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![0.0f32; v.len()];
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let lse = log_sum_exp(row);
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x as f64 - lse) as f32;
            }
        }
        let shape = v.shape().to_vec();
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmaxLast(a))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2("embed", table)?;
        if ids.is_empty() {
            return Err(mismatch("embed", &[self.value(table).shape(), &[0]]));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfRange {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            "embed",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![0.0f32; v.len()];
        let mut inv_std = Vec::with_capacity(v.rows());
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = ((x as f64 - mean) * is) as f32;
            }
            inv_std.push(is as f32);
        }
        let shape = v.shape().to_vec();
        self.push(
            "layernorm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { a, inv_std },
        )
    }

    /// Mean over the last dimension; `[.., n] -> [..]` (a vector becomes `[1]`).
    pub fn mean_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let d = v.last_dim();
        let out: Vec<f32> = v
            .data()
            .chunks(d)
            .map(|r| (r.iter().map(|&x| x as f64).sum::<f64>() / d as f64) as f32)
            .collect();
        let mut shape = v.shape()[..v.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("mean_lastdim", Tensor::from_parts(shape, out), Op::MeanLast(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::SumAll(a))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat", &[]));
        };
        let (_, d) = self.dims2("concat", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat", p)?;
            if c != d {
                return Err(mismatch("concat", &[self.value(first).shape(), self.value(p).shape()]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat",
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, d) = self.dims2("slice", a)?;
        if start >= end || end > r {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: end,
                bound: r,
            });
        }
        let data = self.value(a).data()[start * d..end * d].to_vec();
        self.push(
            "slice",
            Tensor::from_parts(vec![end - start, d], data),
            Op::SliceRows { a, start },
        )
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, d) = self.dims2("pick", a)?;
        if idx.len() != r {
            return Err(mismatch("pick", &[self.value(a).shape(), &[idx.len()]]));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= d {
                return Err(TensorError::OutOfRange {
                    op: "pick",
                    index: j,
                    bound: d,
                });
            }
            out.push(av[i * d + j]);
        }
        self.push(
            "pick",
            Tensor::from_parts(vec![r], out),
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var, TensorError> {
        let t = self.map(a, |x| x.clamp(lo, hi));
        self.push("clamp", t, Op::Clamp { a, lo, hi })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("minimum", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x.min(y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("minimum", Tensor::from_parts(shape, data), Op::Minimum { a, b })
    }

    /// Multi-head causal self-attention mixing: scores `q kᵀ / √d_head`,
    /// masked so position `i` only sees `j <= i`, softmaxed per row and
    /// applied to `v`. All three inputs are `[T, d]`; output is `[T, d]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        self.attention(q, k, v, heads, true)
    }

    /// Like [`Tape::causal_attention`], with the mask optional.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let (t, d) = self.dims2("attention", q)?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] || d % heads != 0 {
            return Err(mismatch(
                "attention",
                &[self.value(q).shape(), self.value(k).shape(), self.value(v).shape()],
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0f32; heads * t * t];
        let mut out = vec![0.0f32; t * d];
        let mut scores = vec![0.0f64; t];
        let mut acc = vec![0.0f64; dh];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                let last = if causal { i } else { t - 1 };
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(last + 1) {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *s = dot64(qi, kj) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut().take(last + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                for j in 0..=last {
                    let p = scores[j] / sum;
                    prow[j] = p as f32;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (a, &x) in acc.iter_mut().zip(vj) {
                        *a += p * x as f64;
                    }
                }
                for (o, a) in out[i * d + off..i * d + off + dh].iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
        }
        self.push(
            "attention",
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// parameter leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.insert(*id, g),
                Op::MatMul { a, b, trans_b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = y.shape()[1];
                    let da = gemm(g.data(), false, bv.data(), !trans_b, m, n, k);
                    accumulate(&mut grads, *a, av.shape(), &da);
                    let db = if *trans_b {
                        gemm(g.data(), true, av.data(), false, n, m, k)
                    } else {
                        gemm(av.data(), true, g.data(), false, k, m, n)
                    };
                    accumulate(&mut grads, *b, bv.shape(), &db);
                }
                Op::Add { a, b, broadcast } => {
                    accumulate(&mut grads, *a, y.shape(), g.data());
                    if *broadcast {
                        let col = column_sums(g.data(), y.last_dim());
                        accumulate(&mut grads, *b, &[col.len()], &col);
                    } else {
                        accumulate(&mut grads, *b, y.shape(), g.data());
                    }
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, y.shape(), g.data());
                    let neg: Vec<f32> = g.data().iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, y.shape(), &neg);
                }
                Op::Mul { a, b, broadcast } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let d = y.last_dim();
                    let bi = |i: usize| if *broadcast { bv[i % d] } else { bv[i] };
                    let da: Vec<f32> = g.data().iter().enumerate().map(|(i, &gi)| gi * bi(i)).collect();
                    let prod: Vec<f32> = g.data().iter().zip(av).map(|(gi, x)| gi * x).collect();
                    accumulate(&mut grads, *a, y.shape(), &da);
                    if *broadcast {
                        let col = column_sums(&prod, d);
                        accumulate(&mut grads, *b, &[d], &col);
                    } else {
                        accumulate(&mut grads, *b, y.shape(), &prod);
                    }
                }
                Op::Scale { a, factor } => {
                    let da: Vec<f32> = g.data().iter().map(|x| x * factor).collect();
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(g.data(), y.data(), |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(g.data(), y.data(), |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Exp(a) => {
                    let da = zip_map(g.data(), y.data(), |gi, yi| gi * yi);
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Log(a) => {
                    let x = self.nodes[a.0].value.data();
                    let da = zip_map(g.data(), x, |gi, xi| gi / xi);
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Softplus(a) => {
                    let x = self.nodes[a.0].value.data();
                    let da = zip_map(g.data(), x, |gi, xi| {
                        gi * (1.0 / (1.0 + (-(xi as f64)).exp())) as f32
                    });
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::LogNormalCdf(a) => {
                    let x = self.nodes[a.0].value.data();
                    let da = zip_map(g.data(), x, |gi, xi| {
                        let xi = xi as f64;
                        let log_pdf = -0.5 * xi * xi - 0.5 * (2.0 * std::f64::consts::PI).ln();
                        gi * (log_pdf - log_ndtr(xi)).exp() as f32
                    });
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::SoftmaxLast(a) => {
                    let d = y.last_dim();
                    let mut da = vec![0.0f32; y.len()];
                    for ((gr, yr), dr) in g.data().chunks(d).zip(y.data().chunks(d)).zip(da.chunks_mut(d)) {
                        let s: f64 = gr.iter().zip(yr).map(|(&gi, &yi)| gi as f64 * yi as f64).sum();
                        for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = (yi as f64 * (gi as f64 - s)) as f32;
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::LogSoftmaxLast(a) => {
                    let d = y.last_dim();
                    let mut da = vec![0.0f32; y.len()];
                    for ((gr, yr), dr) in g.data().chunks(d).zip(y.data().chunks(d)).zip(da.chunks_mut(d)) {
                        let s: f64 = gr.iter().map(|&x| x as f64).sum();
                        for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = (gi as f64 - (yi as f64).exp() * s) as f32;
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Embed { table, ids } => {
                    let ts = self.nodes[table.0].value.shape().to_vec();
                    let d = ts[1];
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(&ts));
                    let sd = slot.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gi) in sd[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += gi;
                        }
                    }
                }
                Op::LayerNorm { a, inv_std } => {
                    let d = y.last_dim();
                    let mut da = vec![0.0f32; y.len()];
                    for (((gr, yr), dr), &is) in g
                        .data()
                        .chunks(d)
                        .zip(y.data().chunks(d))
                        .zip(da.chunks_mut(d))
                        .zip(inv_std)
                    {
                        let mg: f64 = gr.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
                        let mgy: f64 =
                            gr.iter().zip(yr).map(|(&gi, &yi)| gi as f64 * yi as f64).sum::<f64>() / d as f64;
                        for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = (is as f64 * (gi as f64 - mg - yi as f64 * mgy)) as f32;
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::MeanLast(a) => {
                    let xs = self.nodes[a.0].value.shape().to_vec();
                    let d = *xs.last().unwrap();
                    let da: Vec<f32> = g
                        .data()
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi / d as f32, d))
                        .collect();
                    accumulate(&mut grads, *a, &xs, &da);
                }
                Op::SumAll(a) => {
                    let xs = self.nodes[a.0].value.shape().to_vec();
                    let n = xs.iter().product();
                    accumulate(&mut grads, *a, &xs, &vec![g.item(); n]);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let ps = self.nodes[p.0].value.shape().to_vec();
                        let n: usize = ps.iter().product();
                        accumulate(&mut grads, *p, &ps, &g.data()[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceRows { a, start } => {
                    let xs = self.nodes[a.0].value.shape().to_vec();
                    let d = xs[1];
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(&xs));
                    for (o, &gi) in slot.data_mut()[start * d..start * d + g.len()].iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                }
                Op::Pick { a, idx } => {
                    let xs = self.nodes[a.0].value.shape().to_vec();
                    let d = xs[1];
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(&xs));
                    let sd = slot.data_mut();
                    for (i, (&j, &gi)) in idx.iter().zip(g.data()).enumerate() {
                        sd[i * d + j] += gi;
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.nodes[a.0].value.data();
                    let da = zip_map(g.data(), x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                    accumulate(&mut grads, *a, y.shape(), &da);
                }
                Op::Minimum { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut da = vec![0.0f32; y.len()];
                    let mut db = vec![0.0f32; y.len()];
                    for i in 0..y.len() {
                        if av[i] <= bv[i] {
                            da[i] = g.data()[i];
                        } else {
                            db[i] = g.data()[i];
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), &da);
                    accumulate(&mut grads, *b, y.shape(), &db);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    causal,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        g.data(),
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        self.nodes[v.0].value.data(),
                        probs,
                        *heads,
                        *causal,
                        y.shape()[0],
                        y.shape()[1],
                    );
                    let s = y.shape();
                    accumulate(&mut grads, *q, s, &dq);
                    accumulate(&mut grads, *k, s, &dk);
                    accumulate(&mut grads, *v, s, &dv);
                }
            }
        }
        self.nodes.clear();
        self.params.clear();
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: &[f32]) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign_slice(g),
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g.to_vec())),
    }
}

fn column_sums(data: &[f32], d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for row in data.chunks(d) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `ln Φ(x)`, accurate in the far left tail.
pub(crate) fn log_ndtr(x: f64) -> f64 {
    (0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)).ln()
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    heads: usize,
    causal: bool,
    t: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0f64; t * d];
    let mut dk = vec![0.0f64; t * d];
    let mut dv = vec![0.0f64; t * d];
    let mut dp = vec![0.0f64; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let gi = &g[i * d + off..i * d + off + dh];
            let last = if causal { i } else { t - 1 };
            let prow = &probs[(h * t + i) * t..(h * t + i) * t + last + 1];
            let mut weighted = 0.0;
            for j in 0..=last {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = dot64(gi, vj);
                weighted += dp[j] * prow[j] as f64;
                let p = prow[j] as f64;
                for (o, &x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                    *o += p * x as f64;
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..=last {
                let ds = prow[j] as f64 * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                for (o, &x) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                    *o += ds * x as f64;
                }
                for (o, &x) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                    *o += ds * x as f64;
                }
            }
        }
    }
    let cast = |x: Vec<f64>| x.into_iter().map(|v| v as f32).collect();
    (cast(dq), cast(dk), cast(dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::matrix(3, 3, (1..=9).map(|x| x as f32 * 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().item(), 0.25);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (store, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let (store, ids) = store_with(&[
            ("used", Tensor::vector(vec![1.0, 2.0])),
            ("unused", Tensor::vector(vec![3.0])),
        ]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let _unused = tape.param(&store, ids[1]);
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(ids[1]).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let (store, ids) = store_with(&[("p", Tensor::scalar(2.0))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TensorError::EmptyTape));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert!(shapes.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0]));
        assert_eq!(tape.log(a), Err(TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn layernorm_rows_are_centered() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 4, vec![1.0, 5.0, -2.0, 0.3, 10.0, 11.0, 12.0, 13.5]).unwrap());
        let y = tape.layernorm(a).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn attention_first_row_copies_first_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(2, 4, vec![1.0, 0.0, 2.0, 1.0, 0.5, 0.5, 0.1, 0.2]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 4, vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let out = tape.causal_attention(q, q, v, 2).unwrap();
        assert_eq!(tape.value(out).row(0), &[3.0, 4.0, 5.0, 6.0]);
    }
}
