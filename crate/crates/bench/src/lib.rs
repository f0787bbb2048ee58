//! Scenario runner for the dual-grid CFD-DEM simulator.
//!
//! Loads versioned JSON scenario files, runs them on logical ranks, writes
//! metrics, probes, snapshots and a manifest, and compares run directories.

pub mod compare;
pub mod output;
pub mod run;
pub mod scenario;

use std::path::PathBuf;

pub use compare::{compare_runs, CompareReport, ItemDiff};
pub use run::{run, run_file, Manifest, RunResult};
pub use scenario::{LoadedScenario, RunOptions, Scenario, Setup};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    /// A scenario field failed validation.
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("runs are of different scenarios (config hash {a} vs {b})")]
    ScenarioMismatch { a: String, b: String },

    #[error(transparent)]
    Core(#[from] dualgrid_core::Error),
}
