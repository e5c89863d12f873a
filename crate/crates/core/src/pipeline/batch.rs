use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{make_view_pair, AugmentContext, AugmentOp, ItemSampler};
use crate::dataio::PreparedDataset;
use crate::encoder::SequenceBatch;
use crate::error::{Error, Result};

/// One user's training history: every item except the last two.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub user_id: usize,
    pub is_head: bool,
    pub items: Vec<usize>,
}

/// Histories with at least one (input, next item) pair, in user id order.
pub fn training_sequences(ds: &PreparedDataset) -> Vec<TrainSequence> {
    ds.sequences
        .iter()
        .filter(|s| s.items.len() >= 4)
        .map(|s| TrainSequence {
            user_id: s.user_id,
            is_head: s.is_head,
            items: s.items[..s.items.len() - 2].to_vec(),
        })
        .collect()
}

/// Item frequencies over the training histories only.
pub fn training_counts(num_items: usize, seqs: &[TrainSequence]) -> Vec<u64> {
    let mut counts = vec![0u64; num_items + 1];
    for s in seqs {
        for &i in &s.items {
            counts[i] += 1;
        }
    }
    counts
}

pub fn augment_context(ds: &PreparedDataset, max_len: usize, seqs: &[TrainSequence]) -> Result<AugmentContext> {
    Ok(AugmentContext {
        mask_token: ds.mask_token_id,
        max_len,
        sampler: ItemSampler::from_counts(&training_counts(ds.num_items, seqs))?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    pub is_head: Vec<bool>,
    /// Input prefixes, left-padded.
    pub original: SequenceBatch,
    /// Next item for every position of `original`; 0 where there is none.
    pub targets: Vec<usize>,
    pub view_a: SequenceBatch,
    pub view_b: SequenceBatch,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Shapes each history into a shifted (input, target) pair over its most
/// recent `max_len + 1` items and, when `menu` is given, draws a view pair of
/// the input.
pub fn assemble<R: Rng + ?Sized>(
    seqs: &[&TrainSequence],
    max_len: usize,
    menu: Option<(&[AugmentOp], &AugmentContext)>,
    rng: &mut R,
) -> Result<TrainBatch> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = vec![0; seqs.len() * max_len];
    let (mut va, mut vb) = (Vec::new(), Vec::new());
    for (b, s) in seqs.iter().enumerate() {
        if s.items.len() < 2 {
            return Err(Error::Data(format!("user {} has no next-item pair", s.user_id)));
        }
        let window = &s.items[s.items.len().saturating_sub(max_len + 1)..];
        let input = &window[..window.len() - 1];
        let next = &window[1..];
        targets[(b + 1) * max_len - next.len()..(b + 1) * max_len].copy_from_slice(next);
        if let Some((menu, ctx)) = menu {
            let pair = make_view_pair(input, menu, ctx, rng)?;
            va.push(pair.view_a);
            vb.push(pair.view_b);
        } else {
            va.push(input.to_vec());
            vb.push(input.to_vec());
        }
        inputs.push(input.to_vec());
    }
    Ok(TrainBatch {
        users: seqs.iter().map(|s| s.user_id).collect(),
        is_head: seqs.iter().map(|s| s.is_head).collect(),
        original: SequenceBatch::left_padded(&inputs, max_len)?,
        targets,
        view_a: SequenceBatch::left_padded(&va, max_len)?,
        view_b: SequenceBatch::left_padded(&vb, max_len)?,
    })
}

/// Shuffled index chunks of at most `batch_size`; a trailing single index is
/// folded into the previous chunk so every batch has a contrastive negative.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}
