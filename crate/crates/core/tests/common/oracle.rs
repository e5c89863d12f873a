//! Independent reference implementations used as test oracles.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4rec_core::dataio::PreparedDataset;
use s4rec_core::evalkit::{Bucket, EvalReport, Scorer, Split};

/// Log-domain iterative proportional fitting, run to a 1e-9 marginal error.
pub fn ipf_oracle(scores: &[f64], b: usize, k: usize, eps: f64) -> Vec<f64> {
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let col_target = (b as f64 / k as f64).ln();
    let mut l: Vec<f64> = scores.iter().map(|s| s / eps).collect();
    for _ in 0..1_000_000 {
        for c in 0..k {
            let s = lse(&mut (0..b).map(|r| l[r * k + c]));
            (0..b).for_each(|r| l[r * k + c] += col_target - s);
        }
        for r in 0..b {
            let s = lse(&mut l[r * k..(r + 1) * k].iter().copied());
            l[r * k..(r + 1) * k].iter_mut().for_each(|x| *x -= s);
        }
        let worst = (0..k)
            .map(|c| ((0..b).map(|r| l[r * k + c].exp()).sum::<f64>() - b as f64 / k as f64).abs())
            .fold(0.0, f64::max);
        if worst < 1e-9 {
            break;
        }
    }
    l.iter().map(|x| x.exp()).collect()
}

/// Integer scores drawn from a hash of the prefix, so ties are common.
pub struct TieScorer {
    pub num_items: usize,
}

impl Scorer for TieScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_batch(&self, prefixes: &[Vec<usize>]) -> s4rec_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let seed = p.iter().fold(17u64, |h, &x| h.wrapping_mul(31).wrapping_add(x as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.num_items).map(|_| rng.random_range(0..40) as f64).collect()
            })
            .collect())
    }
}

pub fn brute_force(scorer: &TieScorer, ds: &PreparedDataset, split: Split, bucket: Bucket, ks: &[usize]) -> EvalReport {
    let mut users: Vec<_> = ds
        .sequences
        .iter()
        .filter(|s| s.items.len() >= 3 && bucket.contains(s.is_head))
        .collect();
    users.sort_by_key(|s| s.user_id);
    let ranks: Vec<usize> = users
        .iter()
        .map(|s| {
            let n = s.items.len();
            let (history, target) = match split {
                Split::Valid => (&s.items[..n - 2], s.items[n - 2]),
                Split::Test => (&s.items[..n - 1], s.items[n - 1]),
            };
            let scores = &scorer.score_batch(&[history.to_vec()]).unwrap()[0];
            let seen: HashSet<usize> = history.iter().copied().filter(|&i| i != target).collect();
            let mut cands: Vec<usize> = (1..=scorer.num_items).filter(|i| !seen.contains(i)).collect();
            cands.sort_by(|&a, &b| scores[b - 1].total_cmp(&scores[a - 1]).then(a.cmp(&b)));
            cands.iter().position(|&i| i == target).unwrap() + 1
        })
        .collect();
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(
            k,
            ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }).sum::<f64>() / n,
        );
        ndcg.insert(
            k,
            ranks
                .iter()
                .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
                .sum::<f64>()
                / n,
        );
    }
    EvalReport {
        split,
        bucket,
        hr,
        ndcg,
        num_users_evaluated: ranks.len(),
    }
}
