//! Loss terms and the multi-task combiner.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::intent::{soft_cross_entropy, DetachedTargets, PrototypeBank};
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var, MASK_VALUE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta1: 0.1,
            beta2: 0.1,
            lambda: 0.1,
            tau1: 1.0,
            tau2: 0.1,
            tau3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda", self.lambda),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss.{name} must be a finite value >= 0, got {w}"
                )));
            }
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Which auxiliary tasks are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Next-item loss only.
    Sr,
    /// Adds the cluster, contrastive and distillation terms.
    SrCsd,
    /// Adds the adversarial head/tail task on top of `SrCsd`.
    SrCsdGr,
    /// Every task; identical to `SrCsdGr`.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Sr, Self::SrCsd, Self::SrCsdGr, Self::Full];

    pub fn uses_csd(self) -> bool {
        !matches!(self, Self::Sr)
    }

    pub fn uses_gr(self) -> bool {
        matches!(self, Self::SrCsdGr | Self::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sr => "sr",
            Self::SrCsd => "sr_csd",
            Self::SrCsdGr => "sr_csd_gr",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation mode {s:?}; expected sr, sr_csd, sr_csd_gr or full"
            ))
        })
    }
}

/// Scalar values of each term after a forward pass. Disabled terms are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sr: f64,
    pub l_cluster: f64,
    pub l_contrastive: f64,
    pub l_distill: f64,
    pub l_adv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.l_sr,
            self.l_cluster,
            self.l_contrastive,
            self.l_distill,
            self.l_adv,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Full-vocabulary cross-entropy of the next item.
///
/// `hidden` is `[B*L, d]` and `targets[r]` is the item expected after row `r`,
/// or 0 where the row is padding or has no successor.
pub fn next_item_loss<T: Real>(
    tape: &mut Tape<T>,
    encoder: &Encoder,
    params: &ParamSet<T>,
    hidden: Var,
    targets: &[usize],
) -> Result<Var> {
    if tape.shape(hidden).first() != Some(&targets.len()) {
        return Err(Error::shape("next_item_loss", tape.shape(hidden), &[targets.len()]));
    }
    let (rows, labels): (Vec<usize>, Vec<usize>) = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != 0)
        .map(|(r, &t)| (r, t - 1))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Data("next_item_loss: every position is padded".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= encoder.num_items) {
        return Err(Error::Data(format!("target item {} is outside the catalogue", bad + 1)));
    }
    let h = tape.embedding_gather(hidden, &rows)?;
    let logits = encoder.score_items(tape, params, h)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, &labels)?;
    let mean = tape.reduce_mean(picked);
    Ok(tape.scale(mean, T::lit(-1.0)))
}

/// NT-Xent over the `2B` views; rows of `za` and `zb` are unit vectors.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<T>, za: Var, zb: Var, tau1: f64) -> Result<Var> {
    if tape.shape(za) != tape.shape(zb) || tape.shape(za).len() != 2 {
        return Err(Error::shape("contrastive_loss", tape.shape(za), tape.shape(zb)));
    }
    let b = tape.shape(za)[0];
    if b < 2 {
        return Err(Error::Data(
            "contrastive loss needs a batch of at least 2 sequences".into(),
        ));
    }
    if !(tau1 > 0.0) {
        return Err(Error::Config(format!("tau1 must be positive, got {tau1}")));
    }
    let z = tape.concat_rows(&[za, zb])?;
    let sim = tape.matmul_nt(z, z)?;
    let sim = tape.scale(sim, T::lit(1.0 / tau1));
    let n = 2 * b;
    let mut diag = Tensor::zeros(&[n, n]);
    for i in 0..n {
        diag.row_mut(i)[i] = T::lit(MASK_VALUE);
    }
    let diag = tape.constant(diag);
    let sim = tape.add(sim, diag)?;
    let logp = tape.log_softmax(sim);
    let positives: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let picked = tape.pick(logp, &positives)?;
    let mean = tape.reduce_mean(picked);
    Ok(tape.scale(mean, T::lit(-1.0)))
}

/// Tail rows learn the softened assignment distribution, which the
/// prototypes inherit from every row. Returns a constant 0 without tail rows.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss<T: Real>(
    tape: &mut Tape<T>,
    bank: &PrototypeBank,
    params: &ParamSet<T>,
    z_orig: Var,
    tau2: f64,
    tau3: f64,
    head_mask: &[bool],
    targets: &mut DetachedTargets,
) -> Result<Var> {
    if tape.shape(z_orig).first() != Some(&head_mask.len()) {
        return Err(Error::shape("distill_loss", tape.shape(z_orig), &[head_mask.len()]));
    }
    if !(tau2 > 0.0 && tau3 > 0.0) {
        return Err(Error::Config(format!(
            "tau2 and tau3 must be positive, got {tau2} and {tau3}"
        )));
    }
    let tail: Vec<usize> = (0..head_mask.len()).filter(|&i| !head_mask[i]).collect();
    if tail.is_empty() {
        log::debug!("distillation skipped: batch has no tail rows");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let scores = bank.assign_scores(tape, params, z_orig)?;
    let scores = tape.embedding_gather(scores, &tail)?;
    let teacher = targets.get_or_compute(|| {
        let s = tape.value(scores);
        let mut t = Tensor::<f64>::zeros(s.shape());
        for r in 0..s.rows() {
            let row: Vec<f64> = s.row(r).iter().map(|x| x.f64() / tau3).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            t.row_mut(r).iter_mut().zip(&e).for_each(|(o, x)| *o = x / z);
        }
        Ok(t)
    })?;
    let student = tape.scale(scores, T::lit(1.0 / tau2));
    let student = tape.log_softmax(student);
    soft_cross_entropy(tape, &teacher, student)
}

/// Head/tail classifier `d -> d/2 -> 2` with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct AdversaryHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const ADV_NAMES: [&str; 4] = ["adversary.w1", "adversary.b1", "adversary.w2", "adversary.b2"];

impl AdversaryHead {
    pub fn new<T: Real, R: Rng + ?Sized>(dim: usize, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        let hidden = (dim / 2).max(1);
        let std = crate::encoder::INIT_STD;
        Ok(Self {
            w1: params.add_normal(ADV_NAMES[0], &[dim, hidden], std, rng)?,
            b1: params.add(ADV_NAMES[1], Tensor::zeros(&[hidden]))?,
            w2: params.add_normal(ADV_NAMES[2], &[hidden, 2], std, rng)?,
            b2: params.add(ADV_NAMES[3], Tensor::zeros(&[2]))?,
        })
    }

    pub fn from_params<T: Real>(params: &ParamSet<T>) -> Result<Self> {
        let id = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| Error::Format(format!("missing parameter {n}")))
        };
        Ok(Self {
            w1: id(ADV_NAMES[0])?,
            b1: id(ADV_NAMES[1])?,
            w2: id(ADV_NAMES[2])?,
            b2: id(ADV_NAMES[3])?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Class logits `[B, 2]`; class 1 is head.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, z: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(params, self.w1), tape.param(params, self.b1));
        let (w2, b2) = (tape.param(params, self.w2), tape.param(params, self.b2));
        let h = tape.matmul(z, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_bias(o, b2)
    }
}

/// Cross-entropy of the head/tail classifier applied to `grad_reverse(z)`.
pub fn adversarial_loss<T: Real>(
    tape: &mut Tape<T>,
    head: &AdversaryHead,
    params: &ParamSet<T>,
    z: Var,
    head_labels: &[bool],
    lambda: f64,
) -> Result<Var> {
    if tape.shape(z).first() != Some(&head_labels.len()) {
        return Err(Error::shape("adversarial_loss", tape.shape(z), &[head_labels.len()]));
    }
    let reversed = tape.grad_reverse(z, lambda)?;
    let logits = head.logits(tape, params, reversed)?;
    let logp = tape.log_softmax(logits);
    let labels: Vec<usize> = head_labels.iter().map(|&h| usize::from(h)).collect();
    let picked = tape.pick(logp, &labels)?;
    let mean = tape.reduce_mean(picked);
    Ok(tape.scale(mean, T::lit(-1.0)))
}

/// Loss nodes produced by one forward pass; absent terms are disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub sr: Var,
    pub cluster: Option<Var>,
    pub contrastive: Option<Var>,
    pub distill: Option<Var>,
    pub adversarial: Option<Var>,
}

/// `l_sr + alpha l_cluster + beta1 l_con + beta2 l_distill + l_adv`, with the
/// terms not selected by `mode` left out.
pub fn combine<T: Real>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    weights: &LossWeights,
    mode: AblationMode,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
    let mut report = LossReport {
        l_sr: value(tape, Some(terms.sr)),
        ..LossReport::default()
    };
    let mut total = terms.sr;
    let mut add = |tape: &mut Tape<T>, v: Option<Var>, w: f64| -> Result<()> {
        if let Some(v) = v {
            let scaled = tape.scale(v, T::lit(w));
            total = tape.add(total, scaled)?;
        }
        Ok(())
    };
    if mode.uses_csd() {
        add(tape, terms.cluster, weights.alpha)?;
        add(tape, terms.contrastive, weights.beta1)?;
        add(tape, terms.distill, weights.beta2)?;
        report.l_cluster = value(tape, terms.cluster);
        report.l_contrastive = value(tape, terms.contrastive);
        report.l_distill = value(tape, terms.distill);
    }
    if mode.uses_gr() {
        add(tape, terms.adversarial, 1.0)?;
        report.l_adv = value(tape, terms.adversarial);
    }
    report.total = tape.value(total).item().f64();
    if !report.all_finite() {
        return Err(Error::Numerical(format!("non-finite loss: {report:?}")));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::intent::IntentConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn unit_rows(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        let x = tape.input(Tensor::from_rows(rows).unwrap());
        tape.l2_normalize(x)
    }

    #[test]
    fn two_item_vocab_closed_form() {
        let mut ps = ParamSet::<f64>::new();
        let cfg = EncoderConfig {
            dim: 2,
            num_heads: 1,
            max_len: 2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, 2, &mut ps, &mut rng()).unwrap();
        let table = ps.get_mut(enc.item_table());
        table.data_mut().iter_mut().for_each(|x| *x = 0.0);
        table.row_mut(1)[0] = 1.0;
        let mut tape = Tape::new();
        let h = tape.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.3]]).unwrap());
        let loss = next_item_loss(&mut tape, &enc, &ps, h, &[1, 0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        assert!(next_item_loss(&mut tape, &enc, &ps, h, &[0, 0]).is_err());
    }

    #[test]
    fn identical_views_cost_log_2b_minus_1() {
        let mut tape = Tape::<f64>::new();
        let za = unit_rows(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let zb = unit_rows(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let loss = contrastive_loss(&mut tape, za, zb, 1.0).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_views_cost_nearly_zero() {
        let mut tape = Tape::<f64>::new();
        let za = unit_rows(&mut tape, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let zb = unit_rows(&mut tape, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let loss = contrastive_loss(&mut tape, za, zb, 0.1).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn contrastive_rejects_single_row() {
        let mut tape = Tape::<f64>::new();
        let za = unit_rows(&mut tape, &[vec![1.0, 0.0]]);
        let err = contrastive_loss(&mut tape, za, za, 1.0).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn contrastive_decreases_with_positive_similarity() {
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let angle = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let mut tape = Tape::<f64>::new();
            let za = unit_rows(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
            let zb = unit_rows(&mut tape, &[vec![angle.cos(), angle.sin(), 0.0], vec![0.0, 0.0, 1.0]]);
            let l = contrastive_loss(&mut tape, za, zb, 0.5).unwrap();
            let loss = tape.value(l).item();
            assert!(loss < prev);
            prev = loss;
        }
    }

    fn bank(ps: &mut ParamSet<f64>, dim: usize) -> PrototypeBank {
        PrototypeBank::new(IntentConfig::default(), dim, ps, &mut rng()).unwrap()
    }

    #[test]
    fn distill_all_head_is_zero_and_uniform_is_log_k() {
        let mut ps = ParamSet::<f64>::new();
        let bank = bank(&mut ps, 4);
        let mut tape = Tape::new();
        let z = unit_rows(&mut tape, &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let mut t = DetachedTargets::recording();
        let zero = distill_loss(&mut tape, &bank, &ps, z, 0.1, 1.0, &[true, true], &mut t).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);

        ps.get_mut(bank.param()).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::new();
        let z = unit_rows(&mut tape, &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let l = distill_loss(&mut tape, &bank, &ps, z, 0.1, 1.0, &[true, false], &mut t).unwrap();
        assert!((tape.value(l).item() - 128f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_uniform_and_zero_lambda() {
        let mut ps = ParamSet::<f64>::new();
        let head = AdversaryHead::new(4, &mut ps, &mut rng()).unwrap();
        let w2 = head.param_ids()[2];
        ps.get_mut(w2).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::new();
        let z = tape.input(Tensor::from_rows(&[vec![0.5, -0.2, 0.1, 0.9], vec![0.1, 0.2, 0.3, 0.4]]).unwrap());
        let l = adversarial_loss(&mut tape, &head, &ps, z, &[true, false], 0.3).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let ps = {
            let mut ps = ParamSet::<f64>::new();
            AdversaryHead::new(4, &mut ps, &mut rng()).unwrap();
            ps
        };
        let mut tape = Tape::new();
        let z = tape.input(Tensor::from_rows(&[vec![0.5, -0.2, 0.1, 0.9], vec![0.1, 0.2, 0.3, 0.4]]).unwrap());
        let l = adversarial_loss(&mut tape, &head, &ps, z, &[true, false], 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(z).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.param(head.param_ids()[0]).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn combine_respects_mode_and_weights() {
        let mut tape = Tape::<f64>::new();
        let c = |tape: &mut Tape<f64>, x: f64| Some(tape.input(Tensor::scalar(x)));
        let terms = LossTerms {
            sr: tape.input(Tensor::scalar(2.0)),
            cluster: c(&mut tape, 3.0),
            contrastive: c(&mut tape, 5.0),
            distill: c(&mut tape, 7.0),
            adversarial: c(&mut tape, 0.5),
        };
        let ones = LossWeights {
            alpha: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            ..LossWeights::default()
        };
        let (_, r) = combine(&mut tape, &terms, &ones, AblationMode::Sr).unwrap();
        assert_eq!(r.total, 2.0);
        let (_, r) = combine(&mut tape, &terms, &ones, AblationMode::SrCsd).unwrap();
        assert_eq!(r.total, 17.0);
        let (_, r) = combine(&mut tape, &terms, &ones, AblationMode::Full).unwrap();
        assert_eq!(r.total, 17.5);
        let bad = LossWeights {
            beta2: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(
            combine(&mut tape, &terms, &bad, AblationMode::Sr),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("csd".parse::<AblationMode>().is_err());
    }
}
