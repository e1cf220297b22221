//! Sequential training across a task sequence, per-mode comparisons, and
//! the CSV/checkpoint artifacts they leave behind.

mod ablation;
mod config;
pub mod gradcheck;
mod metrics;
mod sequence;
mod train;

pub use ablation::{per_seed_csv, run_ablation, run_comparison, AblationTable, Comparison, ModeRun};
pub use config::{Mode, Regularization, RunConfig, Selection};
pub use gradcheck::{run_gradcheck, CheckResult, GradcheckReport};
pub use metrics::{forgetting_metrics, retained_accuracy, AccuracyMatrix, ForgettingMetrics};
pub use sequence::{run_dir, run_sequence, RunOutcome, TaskRecord, FAILED_MARKER};
pub use train::{train_task, EpochLog, TrainOutcome};
