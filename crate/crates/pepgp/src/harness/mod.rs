//! Data ingestion, synthetic data, metrics, the experiment matrix over
//! (method, pseudo-point count, split) and rank summaries.

mod data;
mod matrix;
mod metrics;
mod model;
mod rank;

pub use data::{
    default_synthetic_hyper, load_csv, load_inputs, read_csv, split, synth_gen, write_csv, CsvSchema, Dataset, Standardizer,
    Synthetic, Task, SYNTH_MAX_N,
};
pub use matrix::{
    read_records, run_matrix, write_long_csv, write_records, CellKey, ExperimentRecord, MatrixConfig, RECORD_SCHEMA,
};
pub use metrics::{metrics_classification, metrics_regression, ClassificationMetrics, RegressionMetrics, TargetStats};
pub use model::{fit_model, FitOptions, Fitted, Method, Model, Predictions, CLASSIFICATION_VFE_ALPHA};
pub use rank::{average_ranks, rank_summary, DiffHistogram, MetricRanks, RankSummary, HISTOGRAM_BINS};
