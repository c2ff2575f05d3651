//! Experiment driver: configuration, datasets, the training loop, variant
//! comparison, and metrics.

pub mod compare;
pub mod config;
pub mod data;
pub mod metrics;
pub mod synthetic;
pub mod train;

pub use compare::{compare_variants, ComparisonTable, VariantRow};
pub use config::{DatasetSpec, ExperimentConfig, OptimizerConfig, Schedule};
pub use data::{load_dataset, parse_cifar_batch, parse_spkt, write_spkt, DataFormat, Dataset, Sample};
pub use metrics::MetricsRecord;
pub use synthetic::synthetic_dataset;
pub use train::{evaluate, evaluate_model, train, TrainOutcome};
