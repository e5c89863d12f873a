use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{assemble, augment_context, epoch_batches, training_sequences, TrainBatch, TrainSequence};
use super::checkpoint::{Checkpoint, CheckpointManifest};
use super::config::{ComplexityBudget, TrainConfig};
use super::model::S4Rec;
use super::timing::TaskTimes;
use crate::augment::{AugmentContext, AugmentOp};
use crate::dataio::{split, PreparedDataset, Splits};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_buckets, nmi, BucketReports, Split, EVAL_BATCH};
use crate::intent::DetachedTargets;
use crate::objectives::{AblationMode, LossReport};
use crate::rng;
use crate::tensor::{Adam, Tape};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_FILE: &str = "run.json";

/// Per-run inputs derived once from the dataset.
pub struct TrainData<'a> {
    pub dataset: &'a PreparedDataset,
    pub sequences: Vec<TrainSequence>,
    pub splits: Splits,
    ctx: AugmentContext,
    menu: Vec<AugmentOp>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a PreparedDataset, config: &TrainConfig) -> Result<Self> {
        let sequences = training_sequences(dataset);
        if sequences.len() < 2 {
            return Err(Error::Data(format!(
                "{} users have enough history to train on; at least 2 are needed",
                sequences.len()
            )));
        }
        let max_len = config.encoder.max_len;
        Ok(Self {
            ctx: augment_context(dataset, max_len, &sequences)?,
            menu: config.augment.ops(),
            splits: split(dataset, max_len),
            sequences,
            dataset,
        })
    }
}

/// Loss and timing summed over an epoch's steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTraining {
    pub steps: usize,
    /// Mean over steps.
    pub loss: LossReport,
    pub timing: TaskTimes,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: AblationMode,
    pub steps: usize,
    pub loss: LossReport,
    pub valid: BucketReports,
    pub cluster_histogram: Vec<usize>,
    pub nmi_cluster_head: f64,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub timing: TaskTimes,
}

/// Cluster occupancy of the validation prefixes and its dependence on the
/// head/tail label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub histogram: Vec<usize>,
    pub nmi_cluster_head: f64,
    pub clusters: Vec<usize>,
    pub is_head: Vec<bool>,
}

pub fn cluster_diagnostics(
    model: &S4Rec<f32>,
    dataset: &PreparedDataset,
    splits: &Splits,
) -> Result<ClusterDiagnostics> {
    let mut views: Vec<_> = splits.views.iter().collect();
    views.sort_by_key(|v| v.user_id);
    let mut clusters = Vec::with_capacity(views.len());
    for chunk in views.chunks(EVAL_BATCH) {
        let prefixes: Vec<Vec<usize>> = chunk
            .iter()
            .map(|v| {
                let s = &dataset.sequence(v.user_id).items;
                s[..s.len() - 2].to_vec()
            })
            .collect();
        clusters.extend(model.clusters(&model.represent(&prefixes)?));
    }
    let is_head: Vec<bool> = views.iter().map(|v| v.is_head).collect();
    let mut histogram = vec![0; model.bank.config.k];
    for &c in &clusters {
        histogram[c] += 1;
    }
    Ok(ClusterDiagnostics {
        histogram,
        nmi_cluster_head: nmi(&clusters, &is_head),
        clusters,
        is_head,
    })
}

/// All mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: S4Rec<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    num_users: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &PreparedDataset) -> Result<Self> {
        config.validate()?;
        let model = S4Rec::new(
            config.encoder.clone(),
            config.intent.clone(),
            dataset.num_items,
            config.seed,
        )?;
        let adam = Adam::new(config.optim.adam(), &model.params);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            best_metric: None,
            best_epoch: 0,
            num_users: dataset.num_users,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, dataset: &PreparedDataset) -> Result<Self> {
        if ck.manifest.num_items != dataset.num_items {
            return Err(Error::Data(format!(
                "checkpoint was trained on {} items but the dataset has {}",
                ck.manifest.num_items, dataset.num_items
            )));
        }
        Ok(Self {
            config: ck.manifest.config,
            model: ck.model,
            adam: ck.adam,
            epoch: ck.manifest.epoch,
            best_metric: ck.manifest.best_metric,
            best_epoch: ck.manifest.best_epoch,
            num_users: dataset.num_users,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: CheckpointManifest {
                config: self.config.clone(),
                config_hash: self.config.hash(),
                num_items: self.model.num_items(),
                num_users: self.num_users,
                epoch: self.epoch,
                best_metric: self.best_metric,
                best_epoch: self.best_epoch,
                adam_step: self.adam.steps(),
                param_names: self.model.params.iter().map(|(_, n, _)| n.to_string()).collect(),
                data: self.config.data.clone(),
            },
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Forward, backward and one optimiser update.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &TrainBatch, rng: &mut R) -> Result<(LossReport, TaskTimes)> {
        let start = Instant::now();
        let mode = self.config.ablation.mode;
        let mut times = TaskTimes::default();
        let mut tape = Tape::new();
        let mut targets = DetachedTargets::recording();
        let (loss, report) = self.model.forward(
            &mut tape,
            batch,
            &self.config.loss,
            mode,
            true,
            rng,
            &mut targets,
            &mut times,
        )?;
        let grads = tape.backward(loss)?;
        times.add_backward(&grads);
        let opt = Instant::now();
        self.adam
            .step(&mut self.model.params, &grads)
            .map_err(|e| Error::Numerical(format!("{e}; loss terms {report:?}")))?;
        if mode.uses_csd() {
            self.model.bank.renormalise(&mut self.model.params);
        }
        times.main += opt.elapsed().as_secs_f64();
        times.step_total = start.elapsed().as_secs_f64();
        Ok((report, times))
    }

    /// Trains epoch `self.epoch + 1` without evaluating.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochTraining> {
        let e = (self.epoch + 1) as u64;
        let seed = self.config.seed;
        let max_len = self.config.encoder.max_len;
        let with_views = self.config.ablation.mode.uses_csd();
        let mut shuffle = rng::stream(seed, "shuffle", e);
        let mut augment = rng::stream(seed, "augment", e);
        let mut dropout = rng::stream(seed, "dropout", e);

        let mut out = EpochTraining::default();
        let mut sum = LossReport::default();
        for idx in epoch_batches(data.sequences.len(), self.config.optim.batch_size, &mut shuffle) {
            let seqs: Vec<_> = idx.iter().map(|&i| &data.sequences[i]).collect();
            let menu = with_views.then_some((data.menu.as_slice(), &data.ctx));
            let batch = assemble(&seqs, max_len, menu, &mut augment)?;
            let (r, t) = self.train_step(&batch, &mut dropout)?;
            sum.l_sr += r.l_sr;
            sum.l_cluster += r.l_cluster;
            sum.l_contrastive += r.l_contrastive;
            sum.l_distill += r.l_distill;
            sum.l_adv += r.l_adv;
            sum.total += r.total;
            out.timing += &t;
            out.steps += 1;
        }
        let n = out.steps.max(1) as f64;
        out.loss = LossReport {
            l_sr: sum.l_sr / n,
            l_cluster: sum.l_cluster / n,
            l_contrastive: sum.l_contrastive / n,
            l_distill: sum.l_distill / n,
            l_adv: sum.l_adv / n,
            total: sum.total / n,
        };
        self.epoch += 1;
        Ok(out)
    }

    /// Trains one epoch, validates, and updates the early-stopping state.
    /// Returns the record and whether the validation metric improved.
    pub fn epoch_with_validation(&mut self, data: &TrainData) -> Result<(EpochRecord, bool)> {
        let trained = self.run_epoch(data)?;
        let valid = evaluate_buckets(
            &self.model,
            data.dataset,
            &data.splits,
            Split::Valid,
            &self.config.eval.ks,
        )?;
        let metric = valid.all.ndcg_at(self.config.eval.early_stop_k).unwrap_or(0.0);
        let improved = self.best_metric.is_none_or(|b| metric > b);
        if improved {
            self.best_metric = Some(metric);
            self.best_epoch = self.epoch;
        }
        let diag = cluster_diagnostics(&self.model, data.dataset, &data.splits)?;
        log::info!(
            "epoch {} loss {:.4} valid ndcg@{} {:.4} (best {:.4} at epoch {})",
            self.epoch,
            trained.loss.total,
            self.config.eval.early_stop_k,
            metric,
            self.best_metric.unwrap_or(0.0),
            self.best_epoch
        );
        Ok((
            EpochRecord {
                epoch: self.epoch,
                mode: self.config.ablation.mode,
                steps: trained.steps,
                loss: trained.loss,
                valid,
                cluster_histogram: diag.histogram,
                nmi_cluster_head: diag.nmi_cluster_head,
                best_epoch: self.best_epoch,
                best_metric: self.best_metric.unwrap_or(0.0),
                timing: trained.timing,
            },
            improved,
        ))
    }

    pub fn should_stop(&self) -> bool {
        self.epoch >= self.config.epochs || (self.epoch > 0 && self.epoch - self.best_epoch >= self.config.patience)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    config: &'a TrainConfig,
    config_hash: String,
    num_users: usize,
    num_items: usize,
    training_users: usize,
    complexity: ComplexityBudget,
}

/// Keeps the first `n` lines of the metrics log.
fn truncate_metrics(path: &Path, n: usize) -> Result<()> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f).lines().take(n).collect::<std::io::Result<_>>()?,
        Err(_) => Vec::new(),
    };
    if kept.len() < n {
        return Err(Error::Data(format!(
            "{} holds {} epochs but the checkpoint has {n}",
            path.display(),
            kept.len()
        )));
    }
    let mut f = File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Trains with early stopping on the validation NDCG, writing the metrics
/// log plus `best.ckpt` and `last.ckpt` under `config.output_dir`.
pub fn fit(config: &TrainConfig, dataset: &PreparedDataset, opts: &FitOptions) -> Result<FitSummary> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let metrics = dir.join(METRICS_FILE);
    let best = dir.join(BEST_CHECKPOINT);
    let last = dir.join(LAST_CHECKPOINT);

    let data = TrainData::new(dataset, config)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.manifest.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let t = Trainer::from_checkpoint(ck, dataset)?;
            t.config.validate()?;
            truncate_metrics(&metrics, t.epoch)?;
            log::info!("resuming after epoch {}", t.epoch);
            Trainer {
                config: config.clone(),
                ..t
            }
        }
        None => {
            File::create(&metrics)?;
            let info = RunInfo {
                config,
                config_hash: config.hash(),
                num_users: dataset.num_users,
                num_items: dataset.num_items,
                training_users: data.sequences.len(),
                complexity: ComplexityBudget::estimate(config, dataset.num_users),
            };
            fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&info)?)?;
            Trainer::new(config.clone(), dataset)?
        }
    };

    while !trainer.should_stop() {
        if opts.stop_after.is_some_and(|n| trainer.epoch >= n) {
            break;
        }
        let (record, improved) = trainer.epoch_with_validation(&data)?;
        if improved {
            trainer.checkpoint().save(&best)?;
        }
        let mut f = OpenOptions::new().append(true).open(&metrics)?;
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
        trainer.checkpoint().save(&last)?;
    }
    Ok(FitSummary {
        epochs_completed: trainer.epoch,
        best_epoch: trainer.best_epoch,
        best_metric: trainer.best_metric.unwrap_or(0.0),
        best_checkpoint: best,
        last_checkpoint: last,
        metrics,
    })
}

/// Parses a metrics log, dropping the wall-clock field from every record.
pub fn read_metrics_without_timing(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = File::open(path)?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(&l?)?;
            if let Some(o) = v.as_object_mut() {
                o.remove("timing");
            }
            Ok(v)
        })
        .collect()
}
