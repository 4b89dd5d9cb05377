//! Performance-change detection for unit-test-sized workloads.
//!
//! The crate measures two versions of a workload across isolated executor
//! starts, decides whether their performance differs, predicts which changes
//! are detectable at all, and searches for the cheapest measurement
//! configuration that still detects small changes reliably.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod harness;
pub mod injection;
pub mod model;
pub mod power;
pub mod stats;
pub mod tuner;
pub mod workloads;

use std::path::{Path, PathBuf};

pub use model::{
    DecisionConfig, MeasurementConfig, MeasurementSeries, ModelError, OutlierPolicy, SeriesSummary,
    TestKind, VmRun, WorkloadKind, WorkloadSpec,
};

/// Crate-level error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Power(#[from] power::PowerError),
    #[error(transparent)]
    Workload(#[from] workloads::WorkloadError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error(transparent)]
    Tuner(#[from] tuner::TunerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
