//! Configuration, the joint training loop, checkpoints and run orchestration.

mod ablate;
mod batch;
mod checkpoint;
mod config;
mod export;
mod model;
mod timing;
mod trainer;

pub use ablate::{ablate, comparison_table, AblationRun};
pub use batch::{assemble, augment_context, epoch_batches, training_sequences, TrainBatch, TrainSequence};
pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::{AblationConfig, ComplexityBudget, EvalConfig, OptimConfig, TrainConfig, ADVERSARY_CLASSES};
pub use export::{embedding_matrix, export_embeddings, read_embeddings, EmbeddingRow};
pub use model::S4Rec;
pub use timing::{TaskTimes, TASK_ADVERSARIAL, TASK_CLUSTER, TASK_DISTILL, TASK_MAIN};
pub use trainer::{
    cluster_diagnostics, fit, read_metrics_without_timing, ClusterDiagnostics, EpochRecord, EpochTraining, FitOptions,
    FitSummary, TrainData, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, RUN_FILE,
};
