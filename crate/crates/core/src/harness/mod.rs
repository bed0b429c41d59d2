//! Experiment harness: configuration, the training loop itself, and the two
//! reporting formats (a structured run log and per-iteration CSV metrics).

pub mod config;
pub mod csv;
pub mod mlperf;
pub mod run;

pub use config::{RunConfig, Scheduling, Transport};
pub use csv::{render_csv, MetricsRow, CSV_HEADER};
pub use mlperf::{parse_log, EventLog, LogSummary};
pub use run::{
    bucket_plan_for, run_process_rank, run_training, split_holdout, EvalPoint, ProcessRankOutcome,
    RankResult, RunError, RunSummary,
};
