//! Run planning, resumable execution and exports.

pub mod execute;
pub mod export;
pub mod plan;
pub mod store;

pub use execute::{enumerate_keys, execute, CompletionReport, ConfigCoverage, ExecuteOptions, FailedKey, WorkItem};
pub use export::{read_bias, write_bias, write_observations, write_performance, write_summary, ExportKind};
pub use plan::{plan_counts, plan_run, task_plans, AuditData, ConfigMatrix, RunManifest, TaskPlan};
pub use store::{load_observations, replay, CompletionIndex, ObservationStore};
