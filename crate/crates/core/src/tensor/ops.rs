//! Forward kernels. Every kernel checks shapes and records its backward data.

use rand::Rng;

use super::tape::{Op, Tape, Var};
use super::{pairwise_sum, Real, Tensor};
use crate::error::{Error, Result};

/// Inputs whose norm falls below this are mapped to zero by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

/// Finite stand-in for `-inf` in additive masks.
pub const MASK_VALUE: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(super) fn gelu<T: Real>(x: T) -> T {
    let x = x.f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::lit(0.5 * x * (1.0 + u.tanh()))
}

pub(super) fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    T::lit(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

impl<T: Real> Tape<T> {
    /// `a [m,k] x b [k,n]`, or `a [m,k] x b^T` with `b [n,k]` when `trans_b`.
    /// `a` may have any rank; its leading axes are flattened into rows.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let k = *ash.last().unwrap();
        let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != bk {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(kernel, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("shapes checked")
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds `b` repeated along the leading axes of `x`; `b`'s shape must be
    /// a suffix of `x`'s shape.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| v + bv[j % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Rows of `table [V,d]` at `ids`, giving `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding_gather", tv.shape(), &[ids.len()]));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding_gather", tv.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start > end || end > xv.shape()[0] {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, end]));
        }
        let d = xv.shape()[1];
        let value = Tensor::new(&[end - start, d], xv.data()[start * d..end * d].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.cols() != d {
                return Err(Error::shape("concat_rows", self.shape(*first), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[rows, d], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let total = pairwise_sum(&exps);
            out.extend(exps.iter().map(|e| T::lit(e / total)));
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let lse = max + pairwise_sum(&exps).ln();
            out.extend(row.iter().map(|v| T::lit(v.f64() - lse)));
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layernorm", xv.shape(), self.shape(gain)));
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = pairwise_sum(row) / c as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(T::lit(s));
            for (j, v) in row.iter().enumerate() {
                let h = T::lit((v.f64() - mean) * s);
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Causal multi-head attention over `[batch*len, d]` projections.
    ///
    /// Query `i` attends to keys `j <= i` of the same sequence with
    /// `key_valid[j]`; masked scores are excluded from the softmax (weight
    /// exactly zero). A query with no admissible key yields a zero row.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2
            || shape[0] != batch * len
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
            || key_valid.len() != batch * len
            || heads == 0
            || !shape[1].is_multiple_of(heads)
        {
            return Err(Error::shape("causal_masked_attention", &shape, self.shape(k)));
        }
        let d = shape[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut out = vec![T::zero(); batch * len * d];
        let mut scores = vec![0.0f64; len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qv[(b * len + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !key_valid[b * len + j] {
                            continue;
                        }
                        let kj = &kv[(b * len + j) * d + off..][..dh];
                        let s: f64 = qi.iter().zip(kj).map(|(&x, &y)| x.f64() * y.f64()).sum();
                        scores[j] = s * scale;
                        max = max.max(scores[j]);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut total = 0.0;
                    for j in 0..=i {
                        if key_valid[b * len + j] {
                            scores[j] = (scores[j] - max).exp();
                            total += scores[j];
                        }
                    }
                    let prow = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let orow = &mut out[(b * len + i) * d + off..][..dh];
                    let mut acc = vec![0.0f64; dh];
                    for j in 0..=i {
                        if !key_valid[b * len + j] {
                            continue;
                        }
                        let p = scores[j] / total;
                        prow[j] = T::lit(p);
                        let vj = &vv[(b * len + j) * d + off..][..dh];
                        for (a, &x) in acc.iter_mut().zip(vj) {
                            *a += p * x.f64();
                        }
                    }
                    for (o, a) in orow.iter_mut().zip(acc) {
                        *o = T::lit(a);
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Scales each row (last axis) to unit L2 norm; rows with norm below
    /// [`NORM_FLOOR`] become zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                norms.push(T::zero());
                out.extend(std::iter::repeat_n(T::zero(), c));
            } else {
                norms.push(T::lit(n));
                out.extend(row.iter().map(|v| T::lit(v.f64() / n)));
            }
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = pairwise_sum(xv.data()) / xv.len().max(1) as f64;
        self.push(Tensor::scalar(T::lit(s)), Op::Mean(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<T> = xv.data().chunks(c).map(|r| T::lit(pairwise_sum(r))).collect();
        let shape = &xv.shape()[..xv.shape().len().saturating_sub(1)];
        let value = Tensor::new(shape, data).expect("row count");
        self.push(value, Op::SumLastAxis(x), &[x])
    }

    /// `out[r] = x[r, idx[r]]` for a matrix `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] != idx.len() || idx.iter().any(|&j| j >= xv.cols()) {
            return Err(Error::shape("pick", xv.shape(), &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(r, &j)| xv.row(r)[j]).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "gradient reversal lambda must be >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        Ok(self.push(
            value,
            Op::GradReverse {
                x,
                lambda: T::lit(lambda),
            },
            &[x],
        ))
    }

    /// Identity node with a pass-through gradient.
    pub fn identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Identity(x), &[x])
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    batch: usize,
    len: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.len() / (batch * len).max(1);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0f64; q.len()];
    let mut dk = vec![0.0f64; k.len()];
    let mut dv = vec![0.0f64; v.len()];
    let mut dp = vec![0.0f64; len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let prow = &probs[((b * heads + h) * len + i) * len..][..len];
                let gi = &g[(b * len + i) * d + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let p = prow[j].f64();
                    if p == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v[(b * len + j) * d + off..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x.f64() * y.f64()).sum();
                    weighted += p * dp[j];
                    let dvj = &mut dv[(b * len + j) * d + off..][..dh];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o += p * x.f64();
                    }
                }
                let qi_base = (b * len + i) * d + off;
                for j in 0..=i {
                    let p = prow[j].f64();
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    let kj_base = (b * len + j) * d + off;
                    for c in 0..dh {
                        dq[qi_base + c] += ds * k[kj_base + c].f64();
                        dk[kj_base + c] += ds * q[qi_base + c].f64();
                    }
                }
            }
        }
    }
    let cast = |xs: Vec<f64>| xs.into_iter().map(T::lit).collect();
    (cast(dq), cast(dk), cast(dv))
}
