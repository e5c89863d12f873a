//! Learnable intent prototypes, balanced soft assignment and the swapped
//! prediction loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntentConfig {
    pub k: usize,
    pub eps: f64,
    pub iters: usize,
}

impl Default for IntentConfig {
    fn default() -> Self {
        Self {
            k: 128,
            eps: 0.05,
            iters: 3,
        }
    }
}

impl IntentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("intent.k must be at least 2, got {}", self.k)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("intent.eps must be positive, got {}", self.eps)));
        }
        if self.iters == 0 {
            return Err(Error::Config("intent.iters must be positive".into()));
        }
        Ok(())
    }
}

/// `K x d` prototype matrix whose rows are kept on the unit sphere.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub config: IntentConfig,
    pub dim: usize,
    mu: ParamId,
}

pub const PROTOTYPE_PARAM: &str = "intent.prototypes";

impl PrototypeBank {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: IntentConfig,
        dim: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mu = params.add_normal(PROTOTYPE_PARAM, &[config.k, dim], 1.0, rng)?;
        let bank = Self { config, dim, mu };
        bank.renormalise(params);
        Ok(bank)
    }

    pub fn from_params<T: Real>(config: IntentConfig, params: &ParamSet<T>) -> Result<Self> {
        let mu = params
            .id(PROTOTYPE_PARAM)
            .ok_or_else(|| Error::Format(format!("missing parameter {PROTOTYPE_PARAM}")))?;
        let shape = params.get(mu).shape();
        if shape.len() != 2 || shape[0] != config.k {
            return Err(Error::Format(format!(
                "prototype matrix has shape {shape:?}, expected [{}, d]",
                config.k
            )));
        }
        Ok(Self {
            dim: shape[1],
            config,
            mu,
        })
    }

    pub fn param(&self) -> ParamId {
        self.mu
    }

    /// Projects every prototype back to unit norm. Call after each update.
    pub fn renormalise<T: Real>(&self, params: &mut ParamSet<T>) {
        let mu = params.get_mut(self.mu);
        for r in 0..mu.rows() {
            let row = mu.row_mut(r);
            let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x = T::lit(x.f64() / norm));
            }
        }
    }

    /// `z [B, d] x mu^T` giving `[B, K]`. `z` is expected to be normalised.
    pub fn assign_scores<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, z: Var) -> Result<Var> {
        let mu = tape.param(params, self.mu);
        tape.matmul_nt(z, mu)
    }

    pub fn codes<T: Real>(&self, scores: &Tensor<T>) -> Result<Tensor<f64>> {
        sinkhorn_codes(scores, self.config.eps, self.config.iters)
    }
}

/// Entropic balanced assignment of `B` samples to `K` prototypes.
///
/// Returns `[B, K]` codes whose rows each sum to 1 and whose columns sum to
/// `B / K` in the limit of many iterations.
pub fn sinkhorn_codes<T: Real>(scores: &Tensor<T>, eps: f64, iters: usize) -> Result<Tensor<f64>> {
    if scores.shape().len() != 2 || scores.is_empty() {
        return Err(Error::shape("sinkhorn_codes", scores.shape(), &[]));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("sinkhorn eps must be positive, got {eps}")));
    }
    let (b, k) = (scores.rows(), scores.cols());
    let max = scores.data().iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("non-finite assignment scores".into()));
    }
    let mut q: Vec<f64> = scores.data().iter().map(|x| ((x.f64() - max) / eps).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);

    let underflow = || Error::Numerical(format!("assignment underflowed at eps = {eps}; increase intent.eps"));
    let mut col = vec![0.0; k];
    for _ in 0..iters {
        col.iter_mut().for_each(|c| *c = 0.0);
        for r in 0..b {
            for (c, &x) in col.iter_mut().zip(&q[r * k..(r + 1) * k]) {
                *c += x;
            }
        }
        if col.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(underflow());
        }
        for r in 0..b {
            for (x, &c) in q[r * k..(r + 1) * k].iter_mut().zip(&col) {
                *x /= c * k as f64;
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(underflow());
            }
            row.iter_mut().for_each(|x| *x /= s * b as f64);
        }
    }
    q.iter_mut().for_each(|x| *x *= b as f64);
    if q.iter().any(|x| !x.is_finite()) {
        return Err(underflow());
    }
    Tensor::new(&[b, k], q)
}

/// Argmax per row, lowest index on ties.
pub fn hard_assignment<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Values computed from the forward pass but held fixed during
/// differentiation.
///
/// In recording mode each call computes and stores its target; in replay mode
/// the stored targets are returned in order. Replay lets a finite-difference
/// check perturb parameters without the targets moving.
#[derive(Clone, Debug, Default)]
pub struct DetachedTargets {
    slots: Vec<Tensor<f64>>,
    cursor: usize,
    replay: bool,
}

impl DetachedTargets {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Switches to replay from the first recorded target.
    pub fn into_replay(mut self) -> Self {
        self.replay = true;
        self.cursor = 0;
        self
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn get_or_compute(&mut self, f: impl FnOnce() -> Result<Tensor<f64>>) -> Result<Tensor<f64>> {
        if self.replay {
            let t = self
                .slots
                .get(self.cursor)
                .cloned()
                .ok_or_else(|| Error::Numerical("detached target replay ran past the recording".into()))?;
            self.cursor += 1;
            Ok(t)
        } else {
            let t = f()?;
            self.slots.push(t.clone());
            Ok(t)
        }
    }
}

/// `-(1/B) sum_i q_i . log p_i` with `q` constant.
pub(crate) fn soft_cross_entropy<T: Real>(tape: &mut Tape<T>, q: &Tensor<f64>, logp: Var) -> Result<Var> {
    if q.shape() != tape.shape(logp) {
        return Err(Error::shape("soft_cross_entropy", q.shape(), tape.shape(logp)));
    }
    let b = q.rows().max(1);
    let q = tape.constant(q.cast());
    let prod = tape.mul(q, logp)?;
    let s = tape.reduce_sum(prod);
    Ok(tape.scale(s, T::lit(-1.0 / b as f64)))
}

/// Swapped prediction between two views: the codes of one view are the
/// targets for the temperature-scaled softmax of the other, and vice versa.
/// `za` and `zb` must already be normalised.
#[allow(clippy::too_many_arguments)]
pub fn cluster_loss<T: Real>(
    tape: &mut Tape<T>,
    bank: &PrototypeBank,
    params: &ParamSet<T>,
    za: Var,
    zb: Var,
    tau2: f64,
    targets: &mut DetachedTargets,
) -> Result<Var> {
    if !(tau2 > 0.0) {
        return Err(Error::Config(format!("tau2 must be positive, got {tau2}")));
    }
    let sa = bank.assign_scores(tape, params, za)?;
    let sb = bank.assign_scores(tape, params, zb)?;
    let qa = targets.get_or_compute(|| bank.codes(tape.value(sa)))?;
    let qb = targets.get_or_compute(|| bank.codes(tape.value(sb)))?;
    let inv = T::lit(1.0 / tau2);
    let la = tape.scale(sa, inv);
    let la = tape.log_softmax(la);
    let lb = tape.scale(sb, inv);
    let lb = tape.log_softmax(lb);
    let ab = soft_cross_entropy(tape, &qb, la)?;
    let ba = soft_cross_entropy(tape, &qa, lb)?;
    tape.add(ab, ba)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_give_uniform_codes() {
        let scores = Tensor::<f64>::from_rows(&vec![vec![0.3, -0.1, 0.7, 0.2]; 6]).unwrap();
        let q = sinkhorn_codes(&scores, 0.05, 3).unwrap();
        for x in q.data() {
            assert!((x - 0.25).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = Tensor::<f32>::new(&[16, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q = sinkhorn_codes(&scores, 0.05, 3).unwrap();
        for r in 0..16 {
            let s: f64 = q.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(q.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = sinkhorn_codes(&Tensor::new(&[8, 5], base.clone()).unwrap(), 0.05, 3).unwrap();
        let shifted = base.iter().map(|x| x + 3.5).collect();
        let b = sinkhorn_codes(&Tensor::new(&[8, 5], shifted).unwrap(), 0.05, 3).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_eps_reports_underflow() {
        let scores = Tensor::<f64>::from_rows(&[vec![1.0, -1.0], vec![-1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let err = sinkhorn_codes(&scores, 1e-4, 3).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("eps")));
    }

    #[test]
    fn hard_assignment_ties_pick_lowest() {
        let p = Tensor::<f64>::from_rows(&[vec![0.2, 0.4, 0.4], vec![0.5, 0.1, 0.4]]).unwrap();
        assert_eq!(hard_assignment(&p), vec![1, 0]);
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let mut ps = ParamSet::<f32>::new();
        let bank = PrototypeBank::new(IntentConfig::default(), 16, &mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mu = ps.get(bank.param());
        for r in 0..128 {
            let n: f32 = mu.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn orthogonal_views_cost_log_k_per_direction() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = PrototypeBank::new(IntentConfig::default(), 4, &mut ps, &mut rng).unwrap();
        // project prototypes into the first two coordinates; views live in the last two
        let mu = ps.get_mut(bank.param());
        for r in 0..128 {
            let row = mu.row_mut(r);
            row[2] = 0.0;
            row[3] = 0.0;
        }
        bank.renormalise(&mut ps);
        let mut tape = Tape::<f64>::new();
        let z = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let za = tape.constant(z.clone());
        let zb = tape.constant(z);
        let mut t = DetachedTargets::recording();
        let loss = cluster_loss(&mut tape, &bank, &ps, za, zb, 0.1, &mut t).unwrap();
        let expected = 2.0 * (128f64).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn replay_returns_recorded_targets() {
        let mut t = DetachedTargets::recording();
        let a = t.get_or_compute(|| Ok(Tensor::scalar(1.0))).unwrap();
        let mut t = t.into_replay();
        let b = t.get_or_compute(|| Ok(Tensor::scalar(2.0))).unwrap();
        assert_eq!(a, b);
        assert!(t.get_or_compute(|| Ok(Tensor::scalar(2.0))).is_err());
    }
}
