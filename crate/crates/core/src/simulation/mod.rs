//! Data generation and the Monte Carlo comparison of DIF detection methods.

mod generate;
mod metrics;
mod study;
mod truth;

pub use generate::{generate_covariates, generate_dataset, generate_responses, generate_responses_with};
pub use metrics::{aggregate, format_value, MetricRow, MetricTable, METRIC_COLUMNS};
pub use study::{
    replication_rng, replication_stream, run_replication, run_study, CoordinateRecord, EmSettings, FitSummary, ItemRecord,
    Method, MethodRecord, ReplicationRecord, StudyConfig, StudyOutput,
};
pub use truth::{DifCondition, TrueModel, COVARIATES, N_ITEMS};
