//! Experiment orchestration: configs, checkpoints, the data-access guard
//! and result reports.

pub mod checkpoint;
pub mod config;
pub mod guard;
pub mod report;
mod run;

pub use config::{canonical_json, ExperimentConfig};
pub use guard::DataGuard;
pub use report::{emit_report, MethodRun, Report, ReportRow, Storage};
pub use run::{load_datasets, load_run_dir, plot_data, run_experiment, run_experiment_with_hook, storage_for, MatrixRow, Outcome};
