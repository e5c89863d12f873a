//! Ranking metrics, bucketed evaluation, k-means and NMI.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{PreparedDataset, SplitView, Splits};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    All,
    Head,
    Tail,
}

impl Bucket {
    pub fn contains(self, is_head: bool) -> bool {
        match self {
            Self::All => true,
            Self::Head => is_head,
            Self::Tail => !is_head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

macro_rules! name_enum {
    ($ty:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Config(format!("unexpected value {s:?} for {}", stringify!($ty)))),
                }
            }
        }
    };
}

name_enum!(Bucket, All => "all", Head => "head", Tail => "tail");
name_enum!(Split, Valid => "valid", Test => "test");

/// 1-based rank of `target` among the non-excluded candidates.
///
/// `logits[j]` scores item `j + 1`; `target` and `excluded` hold item ids.
/// Equal scores are broken in favour of the smaller item id.
pub fn rank_target(logits: &[f64], target: usize, excluded: &HashSet<usize>) -> Result<usize> {
    if target == 0 || target > logits.len() {
        return Err(Error::Data(format!("target item {target} is outside the catalogue")));
    }
    if excluded.contains(&target) {
        return Err(Error::Data(format!("target item {target} is excluded from ranking")));
    }
    let t = logits[target - 1];
    let mut rank = 1;
    for (j, &l) in logits.iter().enumerate() {
        let id = j + 1;
        if id == target || excluded.contains(&id) {
            continue;
        }
        if l > t || (l == t && id < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub bucket: Bucket,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users_evaluated: usize,
}

impl EvalReport {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }
}

/// Anything that scores the full catalogue for a batch of prefixes. Prefixes
/// hold a user's whole history; the scorer keeps whatever window it needs.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    /// One row of `num_items` scores per prefix; entry `j` scores item `j + 1`.
    fn score_batch(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Prefixes scored per call to [`Scorer::score_batch`].
pub const EVAL_BATCH: usize = 256;

/// Ranks each bucket member's held-out item against all items outside the
/// user's history. Users are visited in id order so the result does not
/// depend on how `splits` is arranged.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    dataset: &PreparedDataset,
    splits: &Splits,
    split: Split,
    bucket: Bucket,
    ks: &[usize],
) -> Result<EvalReport> {
    check_inputs(scorer, dataset, ks)?;
    let views = sorted_views(splits, bucket);
    if views.is_empty() {
        return Err(Error::Data(format!("no users in the {bucket} bucket")));
    }
    let ranks = user_ranks(scorer, dataset, &views, split)?;
    Ok(summarise(&ranks, split, bucket, ks))
}

/// Reports for all users and for each non-empty bucket from one scoring pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReports {
    pub all: EvalReport,
    pub head: Option<EvalReport>,
    pub tail: Option<EvalReport>,
}

impl BucketReports {
    pub fn get(&self, bucket: Bucket) -> Option<&EvalReport> {
        match bucket {
            Bucket::All => Some(&self.all),
            Bucket::Head => self.head.as_ref(),
            Bucket::Tail => self.tail.as_ref(),
        }
    }
}

pub fn evaluate_buckets<S: Scorer>(
    scorer: &S,
    dataset: &PreparedDataset,
    splits: &Splits,
    split: Split,
    ks: &[usize],
) -> Result<BucketReports> {
    check_inputs(scorer, dataset, ks)?;
    let views = sorted_views(splits, Bucket::All);
    if views.is_empty() {
        return Err(Error::Data("no users to evaluate".into()));
    }
    let ranks = user_ranks(scorer, dataset, &views, split)?;
    let pick = |bucket: Bucket| {
        let r: Vec<usize> = views
            .iter()
            .zip(&ranks)
            .filter(|(v, _)| bucket.contains(v.is_head))
            .map(|(_, &r)| r)
            .collect();
        (!r.is_empty()).then(|| summarise(&r, split, bucket, ks))
    };
    Ok(BucketReports {
        all: summarise(&ranks, split, Bucket::All, ks),
        head: pick(Bucket::Head),
        tail: pick(Bucket::Tail),
    })
}

fn check_inputs<S: Scorer>(scorer: &S, dataset: &PreparedDataset, ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("evaluation cut-offs must be positive".into()));
    }
    if scorer.num_items() != dataset.num_items {
        return Err(Error::Data(format!(
            "model scores {} items but the dataset has {}",
            scorer.num_items(),
            dataset.num_items
        )));
    }
    Ok(())
}

fn sorted_views(splits: &Splits, bucket: Bucket) -> Vec<&SplitView> {
    let mut views: Vec<_> = splits.views.iter().filter(|v| bucket.contains(v.is_head)).collect();
    views.sort_by_key(|v| v.user_id);
    views
}

fn user_ranks<S: Scorer>(
    scorer: &S,
    dataset: &PreparedDataset,
    views: &[&SplitView],
    split: Split,
) -> Result<Vec<usize>> {
    let mut queries = Vec::with_capacity(views.len());
    for v in views {
        let seq = &dataset.sequence(v.user_id).items;
        let (target, history) = match split {
            Split::Valid => (v.valid_target, &seq[..seq.len() - 2]),
            Split::Test => (v.test_target, &seq[..seq.len() - 1]),
        };
        let mut excluded: HashSet<usize> = history.iter().copied().collect();
        excluded.remove(&target);
        queries.push((history.to_vec(), target, excluded));
    }
    Ok(queries
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let prefixes: Vec<Vec<usize>> = chunk.iter().map(|q| q.0.clone()).collect();
            let scores = scorer.score_batch(&prefixes)?;
            if scores.len() != chunk.len() {
                return Err(Error::Data("scorer returned the wrong number of rows".into()));
            }
            chunk
                .iter()
                .zip(&scores)
                .map(|((_, target, excl), row)| rank_target(row, *target, excl))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .concat())
}

fn summarise(ranks: &[usize], split: Split, bucket: Bucket, ks: &[usize]) -> EvalReport {
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k, ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n);
        ndcg.insert(k, ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n);
    }
    EvalReport {
        split,
        bucket,
        hr,
        ndcg,
        num_users_evaluated: ranks.len(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster is moved to
/// the point farthest from its current centroid.
pub fn kmeans_oracle(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::Data(format!("k-means needs at least k = {k} points, got {n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Data("k-means points have mixed dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut far = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p, &centroids);
            far[i] = dd;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (i, _) = far
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                centroids[c] = points[i].clone();
                far[i] = 0.0;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        iterations,
    })
}

/// Normalised mutual information, `2 I(a;b) / (H(a) + H(b))`, in nats.
/// Returns 0 when both labelings are constant.
pub fn nmi<A: Ord, B: Ord>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "nmi: labelings differ in length");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut ca: BTreeMap<&A, f64> = BTreeMap::new();
    let mut cb: BTreeMap<&B, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(&A, &B), f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *joint.entry((x, y)).or_default() += 1.0;
    }
    let entropy = |counts: Vec<f64>| -> f64 { -counts.iter().map(|&c| c / n * (c / n).ln()).sum::<f64>() };
    let (ha, hb) = (
        entropy(ca.values().copied().collect()),
        entropy(cb.values().copied().collect()),
    );
    if ha + hb <= 0.0 {
        return 0.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|((x, y), &c)| c / n * (c * n / (ca[x] * cb[y])).ln())
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}
