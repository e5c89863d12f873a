use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::trainer::{fit, FitOptions};
use crate::dataio::{split, PreparedDataset};
use crate::error::Result;
use crate::evalkit::{evaluate_buckets, Bucket, BucketReports, Split};
use crate::objectives::AblationMode;

/// Test-split results of one (mode, seed) run, from its best checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: BucketReports,
}

/// Trains every mode under every seed; runs land in
/// `output_dir/<mode>/seed-<seed>`.
pub fn ablate(
    base: &TrainConfig,
    dataset: &PreparedDataset,
    modes: &[AblationMode],
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    let splits = split(dataset, base.encoder.max_len);
    let mut runs = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.ablation.mode = mode;
            cfg.output_dir = base.output_dir.join(mode.as_str()).join(format!("seed-{seed}"));
            log::info!("ablation run {mode} seed {seed}");
            let summary = fit(&cfg, dataset, &FitOptions::default())?;
            let best = Checkpoint::load(&summary.best_checkpoint)?;
            let test = evaluate_buckets(&best.model, dataset, &splits, Split::Test, &cfg.eval.ks)?;
            runs.push(AblationRun {
                mode,
                seed,
                best_epoch: summary.best_epoch,
                test,
            });
        }
    }
    Ok(runs)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Markdown table of seed-averaged test metrics per mode.
pub fn comparison_table(runs: &[AblationRun], ks: &[usize]) -> String {
    let mut modes: Vec<AblationMode> = Vec::new();
    for r in runs {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let mut out = String::from("| mode | seeds |");
    let mut rule = String::from("|---|---|");
    for b in [Bucket::All, Bucket::Tail] {
        for &k in ks {
            let _ = write!(out, " {b} HR@{k} | {b} NDCG@{k} |");
            rule.push_str("---|---|");
        }
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for m in modes {
        let rs: Vec<_> = runs.iter().filter(|r| r.mode == m).collect();
        let _ = write!(out, "| {m} | {} |", rs.len());
        for b in [Bucket::All, Bucket::Tail] {
            for &k in ks {
                let hr = mean(rs.iter().filter_map(|r| r.test.get(b).and_then(|e| e.hr_at(k))));
                let nd = mean(rs.iter().filter_map(|r| r.test.get(b).and_then(|e| e.ndcg_at(k))));
                let _ = write!(out, " {hr:.4} | {nd:.4} |");
            }
        }
        out.push('\n');
    }
    out
}
