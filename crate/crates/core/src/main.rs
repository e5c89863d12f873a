use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use s4rec_core::dataio::{self, InputFormat, PrepareOptions};
use s4rec_core::evalkit::{evaluate, Bucket, Split};
use s4rec_core::objectives::AblationMode;
use s4rec_core::pipeline::{ablate, comparison_table, export_embeddings, fit, Checkpoint, FitOptions, TrainConfig};
use s4rec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "s4rec", version, about = "Intent-aware sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, relabel and split raw interactions into a prepared dataset.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "triplet")]
        format: InputFormat,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long, default_value_t = 0.2)]
        head_ratio: f64,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "all")]
        bucket: Bucket,
        #[arg(long, value_delimiter = ',', default_value = "5,20")]
        k: Vec<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every listed mode under every seed and compare them on test.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sr,sr_csd,sr_csd_gr")]
        modes: Vec<AblationMode>,
        /// Defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write per-user representations and cluster ids as TSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<(TrainConfig, dataio::PreparedDataset)> {
    let cfg = TrainConfig::load(path)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("config has no \"data\" directory".into()))?;
    let ds = dataio::read_prepared(&data)?;
    Ok((cfg, ds))
}

fn checkpoint_data(ck: &Checkpoint, data: Option<PathBuf>) -> Result<dataio::PreparedDataset> {
    let dir = data
        .or_else(|| ck.manifest.data.clone())
        .ok_or_else(|| Error::Config("pass --data; the checkpoint does not record a dataset".into()))?;
    dataio::read_prepared(&dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            input,
            format,
            out,
            min_count,
            head_ratio,
            max_len,
        } => {
            let opts = PrepareOptions {
                min_count,
                head_ratio,
                max_len,
            };
            opts.validate()?;
            let raw = dataio::ingest(&input, format)?;
            let ds = dataio::preprocess(raw.into_sequences(), &opts)?;
            dataio::write_prepared(&ds, &out)?;
            println!(
                "{} users, {} items, {} actions, avg length {:.2}, sparsity {:.4}",
                ds.num_users, ds.num_items, ds.stats.num_actions, ds.stats.avg_length, ds.stats.sparsity
            );
        }
        Command::Train { config, resume } => {
            let (cfg, ds) = load_config(&config)?;
            let s = fit(
                &cfg,
                &ds,
                &FitOptions {
                    resume,
                    stop_after: None,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            bucket,
            k,
            output,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = checkpoint_data(&ck, data)?;
            let splits = dataio::split(&ds, ck.manifest.config.encoder.max_len);
            let report = evaluate(&ck.model, &ds, &splits, split, bucket, &k)?;
            let json = serde_json::to_string_pretty(&report)?;
            match output {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Ablate { config, modes, seeds } => {
            let (cfg, ds) = load_config(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let runs = ablate(&cfg, &ds, &modes, &seeds)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(
                cfg.output_dir.join("ablation.json"),
                serde_json::to_string_pretty(&runs)?,
            )?;
            let table = comparison_table(&runs, &cfg.eval.ks);
            std::fs::write(cfg.output_dir.join("ablation.md"), &table)?;
            print!("{table}");
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = checkpoint_data(&ck, data)?;
            let n = export_embeddings(&ck.model, &ds, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = match std::env::var("S4REC_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: S4REC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        },
        Err(_) => 1,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
