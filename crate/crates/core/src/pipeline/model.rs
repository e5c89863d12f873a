use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::TrainBatch;
use super::timing::{TaskTimes, TASK_ADVERSARIAL, TASK_CLUSTER, TASK_DISTILL, TASK_MAIN};
use crate::encoder::{Encoder, EncoderConfig, SequenceBatch};
use crate::error::Result;
use crate::evalkit::Scorer;
use crate::intent::{cluster_loss, DetachedTargets, IntentConfig, PrototypeBank};
use crate::objectives::{
    adversarial_loss, combine, contrastive_loss, distill_loss, next_item_loss, AblationMode, AdversaryHead, LossReport,
    LossTerms, LossWeights,
};
use crate::rng;
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

/// Encoder, prototype bank and head/tail adversary sharing one parameter set.
#[derive(Clone, Debug)]
pub struct S4Rec<T: Real = f32> {
    pub encoder: Encoder,
    pub bank: PrototypeBank,
    pub adversary: AdversaryHead,
    pub params: ParamSet<T>,
}

impl<T: Real> S4Rec<T> {
    pub fn new(encoder: EncoderConfig, intent: IntentConfig, num_items: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "init", 0);
        let mut params = ParamSet::new();
        let dim = encoder.dim;
        let encoder = Encoder::new(encoder, num_items, &mut params, &mut rng)?;
        let bank = PrototypeBank::new(intent, dim, &mut params, &mut rng)?;
        let adversary = AdversaryHead::new(dim, &mut params, &mut rng)?;
        Ok(Self {
            encoder,
            bank,
            adversary,
            params,
        })
    }

    pub fn from_params(
        encoder: EncoderConfig,
        intent: IntentConfig,
        num_items: usize,
        params: ParamSet<T>,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::from_params(encoder, num_items, &params)?,
            bank: PrototypeBank::from_params(intent, &params)?,
            adversary: AdversaryHead::from_params(&params)?,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> S4Rec<U> {
        S4Rec {
            encoder: self.encoder.clone(),
            bank: self.bank.clone(),
            adversary: self.adversary.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_items(&self) -> usize {
        self.encoder.num_items
    }

    /// Records every loss selected by `mode` and returns the weighted total.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        batch: &TrainBatch,
        weights: &LossWeights,
        mode: AblationMode,
        train: bool,
        rng: &mut R,
        targets: &mut DetachedTargets,
        times: &mut TaskTimes,
    ) -> Result<(Var, LossReport)> {
        let start = Instant::now();
        let b = batch.len();
        let with_views = mode.uses_csd();
        let stacked;
        let seqs = if with_views {
            stacked = SequenceBatch::stack(&[&batch.original, &batch.view_a, &batch.view_b])?;
            &stacked
        } else {
            &batch.original
        };

        tape.set_tag(TASK_MAIN);
        let out = self.encoder.forward(tape, &self.params, seqs, train, rng)?;
        let mut next = batch.targets.clone();
        next.resize(seqs.ids.len(), 0);
        let sr = next_item_loss(tape, &self.encoder, &self.params, out.hidden, &next)?;
        let mut terms = LossTerms {
            sr,
            cluster: None,
            contrastive: None,
            distill: None,
            adversarial: None,
        };
        let z = (with_views || mode.uses_gr()).then(|| tape.l2_normalize(out.seq_repr));
        times.main += start.elapsed().as_secs_f64();

        if let Some(z) = z {
            let z_orig = tape.slice_rows(z, 0, b)?;
            if with_views {
                let za = tape.slice_rows(z, b, 2 * b)?;
                let zb = tape.slice_rows(z, 2 * b, 3 * b)?;

                let start = Instant::now();
                tape.set_tag(TASK_CLUSTER);
                terms.cluster = Some(cluster_loss(
                    tape,
                    &self.bank,
                    &self.params,
                    za,
                    zb,
                    weights.tau2,
                    targets,
                )?);
                times.cluster += start.elapsed().as_secs_f64();

                let start = Instant::now();
                tape.set_tag(TASK_DISTILL);
                terms.contrastive = Some(contrastive_loss(tape, za, zb, weights.tau1)?);
                terms.distill = Some(distill_loss(
                    tape,
                    &self.bank,
                    &self.params,
                    z_orig,
                    weights.tau2,
                    weights.tau3,
                    &batch.is_head,
                    targets,
                )?);
                times.distill += start.elapsed().as_secs_f64();
            }
            if mode.uses_gr() {
                let start = Instant::now();
                tape.set_tag(TASK_ADVERSARIAL);
                terms.adversarial = Some(adversarial_loss(
                    tape,
                    &self.adversary,
                    &self.params,
                    z_orig,
                    &batch.is_head,
                    weights.lambda,
                )?);
                times.adversarial += start.elapsed().as_secs_f64();
            }
        }
        let start = Instant::now();
        tape.set_tag(TASK_MAIN);
        let out = combine(tape, &terms, weights, mode)?;
        times.main += start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Eval-mode sequence representations `[n, dim]`; prefixes are truncated
    /// to the most recent `max_len` items.
    pub fn represent(&self, prefixes: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let repr = self.eval_repr(&mut tape, prefixes)?;
        Ok(tape.value(repr).clone())
    }

    fn eval_repr(&self, tape: &mut Tape<T>, prefixes: &[Vec<usize>]) -> Result<Var> {
        let batch = SequenceBatch::left_padded(prefixes, self.encoder.config.max_len)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self
            .encoder
            .forward(tape, &self.params, &batch, false, &mut unused)?
            .seq_repr)
    }

    /// Nearest prototype by cosine for each row of `reprs`.
    pub fn clusters(&self, reprs: &Tensor<T>) -> Vec<usize> {
        let mu = self.params.get(self.bank.param());
        (0..reprs.rows())
            .map(|r| {
                let row = reprs.row(r);
                let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt().max(1e-12);
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..mu.rows() {
                    let s: f64 = row.iter().zip(mu.row(k)).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / norm;
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect()
    }
}

impl<T: Real> Scorer for S4Rec<T> {
    fn num_items(&self) -> usize {
        self.encoder.num_items
    }

    fn score_batch(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let repr = self.eval_repr(&mut tape, prefixes)?;
        let logits = self.encoder.score_items(&mut tape, &self.params, repr)?;
        let v = tape.value(logits);
        Ok((0..v.rows())
            .map(|r| v.row(r).iter().map(|x| x.f64()).collect())
            .collect())
    }
}
