//! Synthetic recall training: task generation, optimizer and loop.

pub mod headline;
pub mod optim;
pub mod task;
pub mod trainer;

pub use headline::{run_headline, HeadlineConfig, HeadlineReport, PairedRun, VariantRun};
pub use optim::{OptimConfig, OptimState};
pub use task::{gen_recall_batch, RecallBatch, RecallTask, IGNORE};
pub use trainer::{
    chance_band, evaluate, evaluate_length_generalization, length_csv, trace_csv, train, MetricRow, TrainConfig,
    TrainOutcome,
};
