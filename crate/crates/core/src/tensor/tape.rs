use std::collections::HashMap;
use std::time::{Duration, Instant};

use super::{ParamId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: T,
    },
    Identity(Var),
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) needs_grad: bool,
    tag: usize,
}

/// Records operations in execution order; parents always precede children,
/// so a single reverse sweep visits every node exactly once.
///
/// A tape belongs to one worker. Parameters are bound at most once per tape,
/// so every use of a parameter shares one leaf and its gradients add up.
pub struct Tape<T: Real = f32> {
    pub(super) nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    tag: usize,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            tag: 0,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Tags subsequently recorded nodes; backward time is reported per tag.
    pub fn set_tag(&mut self, tag: usize) -> usize {
        std::mem::replace(&mut self.tag, tag)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A free input that receives a gradient (when the tape records them).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let g = self.grad_enabled;
        self.leaf(value, g)
    }

    /// Binds a parameter; repeated calls return the same leaf.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.input(params.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            tag: self.tag,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tag: self.tag,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", root.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut tag_time: HashMap<usize, Duration> = HashMap::new();
        if root.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let start = Instant::now();
            self.backprop(i, &g, &mut grads);
            *tag_time.entry(node.tag).or_default() += start.elapsed();
        }
        let mut leaves = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad {
                    let t = Tensor::new(self.nodes[i].value.shape(), g)?;
                    leaves.insert(i, t);
                }
            }
        }
        let params = self
            .bound
            .iter()
            .map(|(&p, v)| {
                let g = leaves
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (p, g)
            })
            .collect();
        Ok(Gradients {
            leaves,
            params,
            tag_time,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], scale: T) {
        if let Some(dst) = self.acc(grads, v) {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d = *d + scale * x;
            }
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = val(*a);
                let bv = val(*b);
                let k = av.cols();
                let m = av.len() / k.max(1);
                let n = node.value.cols();
                if let Some(da) = self.acc(grads, *a) {
                    // dA = G op(B)^T
                    T::gemm(m, n, k, g, false, bv.data(), !*trans_b, da, true);
                }
                if let Some(db) = self.acc(grads, *b) {
                    if *trans_b {
                        // B is [n,k]: dB = G^T A
                        T::gemm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        T::gemm(k, m, n, av.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g, T::one());
                self.add_into(grads, *b, g, T::one());
            }
            Op::AddBias(x, b) => {
                self.add_into(grads, *x, g, T::one());
                if let Some(db) = self.acc(grads, *b) {
                    let n = db.len();
                    let mut acc = vec![0.0f64; n];
                    for (j, &gj) in g.iter().enumerate() {
                        acc[j % n] += gj.f64();
                    }
                    for (d, s) in db.iter_mut().zip(acc) {
                        *d = *d + T::lit(s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = val(*a).data();
                let bv = val(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gj), &bj) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gj * bj;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gj), &aj) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gj * aj;
                    }
                }
            }
            Op::Scale(a, c) => self.add_into(grads, *a, g, *c),
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o = *o + s;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    let dst = &mut dx[start * d..start * d + g.len()];
                    for (o, &s) in dst.iter_mut().zip(g) {
                        *o = *o + s;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    self.add_into(grads, *p, &g[offset..offset + n], T::one());
                    offset += n;
                }
            }
            Op::Reshape(a) | Op::Identity(a) => self.add_into(grads, *a, g, T::one()),
            Op::GradReverse { x, lambda } => self.add_into(grads, *x, g, -*lambda),
            Op::Softmax(a) => {
                let c = node.value.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(&gj, &yj)| (gj * yj).f64()).sum();
                        let dot = T::lit(dot);
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yj * (gj - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total = T::lit(gr.iter().map(|x| x.f64()).sum());
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + gj - yj.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = val(*gain).data();
                if let Some(dg) = self.acc(grads, *gain) {
                    let mut acc = vec![0.0f64; c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((a, &gj), &xj) in acc.iter_mut().zip(gr).zip(xr) {
                            *a += (gj * xj).f64();
                        }
                    }
                    for (d, s) in dg.iter_mut().zip(acc) {
                        *d = *d + T::lit(s);
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    let mut acc = vec![0.0f64; c];
                    for gr in g.chunks(c) {
                        for (a, &gj) in acc.iter_mut().zip(gr) {
                            *a += gj.f64();
                        }
                    }
                    for (d, s) in db.iter_mut().zip(acc) {
                        *d = *d + T::lit(s);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_c = 1.0 / c as f64;
                    for (r, ((dr, gr), xr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for ((&gj, &wj), &xj) in gr.iter().zip(gv).zip(xr) {
                            let dxh = (gj * wj).f64();
                            mean_d += dxh;
                            mean_dx += dxh * xj.f64();
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        let s = inv_std[r].f64();
                        for (((d, &gj), &wj), &xj) in dr.iter_mut().zip(gr).zip(gv).zip(xr) {
                            let dxh = (gj * wj).f64();
                            *d = *d + T::lit(s * (dxh - mean_d - xj.f64() * mean_dx));
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = val(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gj), &xj) in da.iter_mut().zip(g).zip(xv) {
                        *d = *d + gj * super::ops::gelu_grad(xj);
                    }
                }
            }
            Op::Relu(a) => {
                let xv = val(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gj), &xj) in da.iter_mut().zip(g).zip(xv) {
                        if xj > T::zero() {
                            *d = *d + gj;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gj), &mj) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gj * mj;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = super::ops::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    *batch,
                    *len,
                    *heads,
                );
                self.add_into(grads, *q, &dq, T::one());
                self.add_into(grads, *k, &dk, T::one());
                self.add_into(grads, *v, &dv, T::one());
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, ((dr, gr), yr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                        let n = norms[r];
                        if n == T::zero() {
                            continue;
                        }
                        let dot = T::lit(gr.iter().zip(yr).map(|(&a, &b)| (a * b).f64()).sum());
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + (gj - yj * dot) / n;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let xv = val(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gj), &xj) in da.iter_mut().zip(g).zip(xv) {
                        *d = *d + gj / xj;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gj), &yj) in da.iter_mut().zip(g).zip(y) {
                        *d = *d + gj * yj;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let s = g[0] / T::lit(da.len() as f64);
                    for d in da.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::SumLastAxis(a) => {
                let c = val(*a).cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (dr, &gj) in da.chunks_mut(c).zip(g) {
                        for d in dr.iter_mut() {
                            *d = *d + gj;
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = val(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, (&j, &gj)) in idx.iter().zip(g).enumerate() {
                        dx[r * c + j] = dx[r * c + j] + gj;
                    }
                }
            }
        }
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
    tag_time: HashMap<usize, Duration>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradient of a parameter bound on the tape (zeros when unreachable);
    /// `None` if the parameter was never bound.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&p, t)| (p, t))
    }

    /// Backward wall-clock attributed to each tape tag.
    pub fn tag_time(&self, tag: usize) -> Duration {
        self.tag_time.get(&tag).copied().unwrap_or_default()
    }
}
