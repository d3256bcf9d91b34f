//! Synthetic data, registration driver, metrics, toy training and reports.

pub mod dataset;
pub mod metrics;
pub mod register;
pub mod report;
pub mod synth;
pub mod train;

pub use dataset::{list_pairs, pair_seed, PairRecord};
pub use metrics::{chamfer_error, rotation_error, translation_error, PairMetrics};
pub use register::{register_pairs, run_register, Diagnostics, PairEntry, RegisterConfig, Registration, RunReport};
pub use report::{aggregate, emit_report, AggregateReport, PairResult};
pub use synth::{generate_synthetic_pair, SynthConfig};
pub use train::{epoch_means, pair_loss, train_toy, IterationRecord, TrainConfig, TrainOutput};
