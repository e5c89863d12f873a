//! Stochastic sequence augmentations: mask, crop, reorder, insert.
//!
//! All randomness comes from the caller's generator, so a fixed seed replays
//! the same views.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Mask,
    Crop,
    Reorder,
    Insert,
}

/// An operator together with its strength.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    Mask { gamma: f64 },
    Crop { delta: f64 },
    Reorder { delta: f64 },
    Insert { ratio: f64 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Mask { .. } => AugmentKind::Mask,
            AugmentOp::Crop { .. } => AugmentKind::Crop,
            AugmentOp::Reorder { .. } => AugmentKind::Reorder,
            AugmentOp::Insert { .. } => AugmentKind::Insert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub menu: Vec<AugmentKind>,
    pub crop_delta: f64,
    pub reorder_delta: f64,
    pub mask_gamma: f64,
    pub insert_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            menu: vec![
                AugmentKind::Mask,
                AugmentKind::Crop,
                AugmentKind::Reorder,
                AugmentKind::Insert,
            ],
            crop_delta: 0.8,
            reorder_delta: 0.2,
            mask_gamma: 0.3,
            insert_ratio: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.menu.is_empty() {
            return Err(Error::Config("aug.menu must not be empty".into()));
        }
        let in_unit = |name: &str, x: f64, closed: bool| {
            let ok = x > 0.0 && (x < 1.0 || (closed && x == 1.0));
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("aug.{name} out of range: {x}")))
            }
        };
        in_unit("crop_delta", self.crop_delta, true)?;
        in_unit("reorder_delta", self.reorder_delta, true)?;
        in_unit("mask_gamma", self.mask_gamma, false)?;
        in_unit("insert_ratio", self.insert_ratio, true)
    }

    pub fn ops(&self) -> Vec<AugmentOp> {
        self.menu
            .iter()
            .map(|k| match k {
                AugmentKind::Mask => AugmentOp::Mask { gamma: self.mask_gamma },
                AugmentKind::Crop => AugmentOp::Crop { delta: self.crop_delta },
                AugmentKind::Reorder => AugmentOp::Reorder {
                    delta: self.reorder_delta,
                },
                AugmentKind::Insert => AugmentOp::Insert {
                    ratio: self.insert_ratio,
                },
            })
            .collect()
    }
}

/// `floor(frac * n)` tolerant to representation error (0.29 * 100 is 29).
fn portion(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Replaces `floor(gamma * |seq|)` distinct uniformly chosen positions with
/// `mask_token`.
pub fn mask<R: Rng + ?Sized>(seq: &[usize], gamma: f64, mask_token: usize, rng: &mut R) -> Vec<usize> {
    let mut out = seq.to_vec();
    let k = portion(gamma, seq.len());
    if k == 0 {
        return out;
    }
    for i in index::sample(rng, seq.len(), k) {
        out[i] = mask_token;
    }
    out
}

/// Removes `seq[start..start + len]`.
pub fn crop_at(seq: &[usize], start: usize, len: usize) -> Vec<usize> {
    let mut out = seq[..start].to_vec();
    out.extend_from_slice(&seq[start + len..]);
    out
}

/// Removes a contiguous block of `max(1, floor(delta * |seq|))` items. When
/// that would empty the sequence a single uniformly chosen item survives.
pub fn crop<R: Rng + ?Sized>(seq: &[usize], delta: f64, rng: &mut R) -> Vec<usize> {
    let n = seq.len();
    if n <= 1 {
        return seq.to_vec();
    }
    let lc = portion(delta, n).max(1);
    if lc >= n {
        return vec![seq[rng.random_range(0..n)]];
    }
    let start = rng.random_range(0..=n - lc);
    crop_at(seq, start, lc)
}

/// Uniformly permutes a contiguous window of `max(2, floor(delta * |seq|))`.
pub fn reorder<R: Rng + ?Sized>(seq: &[usize], delta: f64, rng: &mut R) -> Vec<usize> {
    let n = seq.len();
    let mut out = seq.to_vec();
    if n < 2 {
        return out;
    }
    let lc = portion(delta, n).clamp(2, n);
    let start = rng.random_range(0..=n - lc);
    out[start..start + lc].shuffle(rng);
    out
}

/// Draws item ids proportionally to their training frequency.
#[derive(Clone, Debug)]
pub struct ItemSampler {
    dist: WeightedIndex<u64>,
}

impl ItemSampler {
    /// `counts[i]` is the frequency of item `i`; index 0 (padding) must be 0.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let dist = WeightedIndex::new(counts.iter().copied()).map_err(|e| Error::Data(format!("item sampler: {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Inserts `max(1, floor(ratio * |seq|))` sampled items at uniform positions,
/// then keeps the most recent `max_len`.
pub fn insert<R: Rng + ?Sized>(
    seq: &[usize],
    ratio: f64,
    sampler: &ItemSampler,
    max_len: usize,
    rng: &mut R,
) -> Vec<usize> {
    let k = portion(ratio, seq.len()).max(1);
    let mut out = seq.to_vec();
    for _ in 0..k {
        let pos = rng.random_range(0..=out.len());
        out.insert(pos, sampler.sample(rng));
    }
    let start = out.len().saturating_sub(max_len);
    out.split_off(start)
}

/// Everything an operator may need besides the sequence.
#[derive(Clone, Debug)]
pub struct AugmentContext {
    pub mask_token: usize,
    pub max_len: usize,
    pub sampler: ItemSampler,
}

impl AugmentContext {
    pub fn apply<R: Rng + ?Sized>(&self, op: AugmentOp, seq: &[usize], rng: &mut R) -> Vec<usize> {
        match op {
            AugmentOp::Mask { gamma } => mask(seq, gamma, self.mask_token, rng),
            AugmentOp::Crop { delta } => crop(seq, delta, rng),
            AugmentOp::Reorder { delta } => reorder(seq, delta, rng),
            AugmentOp::Insert { ratio } => insert(seq, ratio, &self.sampler, self.max_len, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Vec<usize>,
    pub view_b: Vec<usize>,
    pub op_a: AugmentOp,
    pub op_b: AugmentOp,
}

/// Two independently drawn operators applied to independent copies of `seq`.
pub fn make_view_pair<R: Rng + ?Sized>(
    seq: &[usize],
    menu: &[AugmentOp],
    ctx: &AugmentContext,
    rng: &mut R,
) -> Result<ViewPair> {
    let op_a = *menu
        .choose(rng)
        .ok_or_else(|| Error::Config("augmentation menu is empty".into()))?;
    let op_b = *menu.choose(rng).expect("non-empty");
    let view_a = ctx.apply(op_a, seq, rng);
    let view_b = ctx.apply(op_b, seq, rng);
    Ok(ViewPair {
        view_a,
        view_b,
        op_a,
        op_b,
    })
}
