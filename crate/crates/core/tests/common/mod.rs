#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4rec_core::dataio::PreparedDataset;
use s4rec_core::pipeline::TrainConfig;

/// Users follow one of `intents` item blocks; within a block the next item
/// is usually the successor of the current one.
pub fn planted(num_users: usize, num_items: usize, intents: usize, len: (usize, usize), seed: u64) -> PreparedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = num_items / intents;
    let seqs = (0..num_users)
        .map(|u| {
            let c = u % intents;
            let n = rng.random_range(len.0..=len.1);
            let mut cur = rng.random_range(0..block);
            (0..n)
                .map(|_| {
                    cur = if rng.random::<f64>() < 0.8 {
                        (cur + 1) % block
                    } else {
                        rng.random_range(0..block)
                    };
                    c * block + cur + 1
                })
                .collect()
        })
        .collect();
    PreparedDataset::from_id_sequences(seqs, num_items, 0.2).unwrap()
}

pub fn small_config(seed: u64, dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::with_seed(seed);
    cfg.output_dir = dir.to_path_buf();
    cfg.encoder.dim = 16;
    cfg.encoder.max_len = 12;
    cfg.encoder.num_blocks = 1;
    cfg.encoder.num_heads = 2;
    cfg.encoder.dropout = 0.1;
    cfg.intent.k = 4;
    cfg.optim.batch_size = 32;
    cfg.optim.lr = 0.005;
    cfg.epochs = 4;
    cfg
}

/// Intent blocks shared by every user, plus a pool of noise items that only
/// long sequences contain. Length is therefore entangled with the noise, not
/// with the intent.
pub fn confounded(
    num_users: usize,
    intents: usize,
    block: usize,
    noise_items: usize,
    noise_rate: f64,
    seed: u64,
) -> PreparedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_items = intents * block + noise_items;
    let seqs = (0..num_users)
        .map(|u| {
            let c = u % intents;
            let long = rng.random::<f64>() < 0.2;
            let n = if long {
                rng.random_range(30..=45)
            } else {
                rng.random_range(5..=10)
            };
            let mut cur = rng.random_range(0..block);
            (0..n)
                .map(|_| {
                    if long && rng.random::<f64>() < noise_rate {
                        return intents * block + rng.random_range(0..noise_items) + 1;
                    }
                    cur = if rng.random::<f64>() < 0.8 {
                        (cur + 1) % block
                    } else {
                        rng.random_range(0..block)
                    };
                    c * block + cur + 1
                })
                .collect()
        })
        .collect();
    PreparedDataset::from_id_sequences(seqs, num_items, 0.2).unwrap()
}
