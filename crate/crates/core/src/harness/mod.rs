//! End-to-end orchestration over synthetic data: generation, training
//! with margin phases, evaluation and report files.

pub mod config;
pub mod dataset;
pub mod margin_phase;
pub mod model;
pub mod report;
pub mod train;

pub use config::{DataConfig, FeatureMode, ModelConfig, RlConfig, RunConfig, TrainConfig, MIVIA_PROPORTIONS};
pub use dataset::{generate_synthetic_dataset, largest_remainder_counts, prepare, Dataset, Prepared, SyntheticSample};
pub use margin_phase::{probe_deviations, run_margin_phase, MarginEnv, PhaseLog, Probe};
pub use model::AgeModel;
pub use report::{
    emit_report, write_atomic, EpochLog, PolicyGrid, PolicyRow, RunReport, METRICS_FILE, POLICY_FILE, REPORT_FILE, REPORT_SCHEMA,
};
pub use train::{evaluate, run_training, stream_rng, Checkpoint, Stream, TrainOutcome, Trainer};
