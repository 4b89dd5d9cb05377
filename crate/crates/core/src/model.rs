//! Shared domain types and the JSON result document.
//!
//! Durations are stored as integer nanoseconds per *iteration*; per-repetition
//! values are derived on demand so no precision is lost to early division.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version string written into every series document.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("malformed document at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error("unsupported format_version `{found}` (expected `{FORMAT_VERSION}`)")]
    FormatVersion { found: String },
    #[error("invariant violated at `{path}`: {message}")]
    Invariant { path: String, message: String },
}

impl ModelError {
    pub(crate) fn invariant(path: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Invariant {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Field path the error refers to, empty for version mismatches.
    pub fn path(&self) -> &str {
        match self {
            ModelError::Malformed { path, .. } | ModelError::Invariant { path, .. } => path,
            ModelError::FormatVersion { .. } => "format_version",
        }
    }
}

/// Full parametrization of one measurement campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeasurementConfig {
    /// Isolated executor starts per version.
    pub vms: u32,
    pub warmup_iterations: u32,
    pub measurement_iterations: u32,
    /// Workload executions between one start/stop timestamp pair.
    pub repetitions: u64,
    pub trigger_gc_between_iterations: bool,
    pub parallel_pairs: bool,
}

impl Default for MeasurementConfig {
    /// 30 VMs, 49 warmup and 49 measurement iterations, 100,000 repetitions,
    /// parallel pairs.
    fn default() -> Self {
        MeasurementConfig {
            vms: 30,
            warmup_iterations: 49,
            measurement_iterations: 49,
            repetitions: 100_000,
            trigger_gc_between_iterations: false,
            parallel_pairs: true,
        }
    }
}

impl MeasurementConfig {
    /// Config with as many warmup iterations as measurement iterations.
    pub fn equal_warmup(vms: u32, iterations: u32, repetitions: u64) -> Self {
        MeasurementConfig {
            vms,
            warmup_iterations: iterations,
            measurement_iterations: iterations,
            repetitions,
            ..MeasurementConfig::default()
        }
    }

    pub fn total_iterations(&self) -> u32 {
        self.warmup_iterations + self.measurement_iterations
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_at("config")
    }

    fn validate_at(&self, prefix: &str) -> Result<(), ModelError> {
        if self.vms < 1 {
            return Err(ModelError::invariant(
                format!("{prefix}.vms"),
                "must be >= 1",
            ));
        }
        if self.measurement_iterations < 1 {
            return Err(ModelError::invariant(
                format!("{prefix}.measurement_iterations"),
                "must be >= 1",
            ));
        }
        if self.repetitions < 1 {
            return Err(ModelError::invariant(
                format!("{prefix}.repetitions"),
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    /// Sum pseudo-random numbers.
    Add,
    /// Allocate three-integer records and retain them.
    Allocate,
    /// Format pseudo-random numbers as text.
    Write,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 3] = [
        WorkloadKind::Add,
        WorkloadKind::Allocate,
        WorkloadKind::Write,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Add => "add",
            WorkloadKind::Allocate => "allocate",
            WorkloadKind::Write => "write",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Ok(WorkloadKind::Add),
            "allocate" => Ok(WorkloadKind::Allocate),
            "write" => Ok(WorkloadKind::Write),
            other => Err(format!(
                "unknown workload kind `{other}` (expected add, allocate or write)"
            )),
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}

fn is_full_fraction(f: &f64) -> bool {
    *f == 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Primitive operations per workload execution.
    pub size: u64,
    /// Busy-wait per selected primitive operation, 0 = unmodified.
    pub injected_delay_ns: u64,
    pub seed: u64,
    /// Share of primitive operations that receive the injected delay.
    #[serde(default = "default_fraction", skip_serializing_if = "is_full_fraction")]
    pub delay_fraction: f64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, size: u64) -> Self {
        WorkloadSpec {
            kind,
            size,
            injected_delay_ns: 0,
            seed: 0,
            delay_fraction: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_delay_ns(mut self, delay_ns: u64) -> Self {
        self.injected_delay_ns = delay_ns;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_at("workload")
    }

    fn validate_at(&self, prefix: &str) -> Result<(), ModelError> {
        if self.size < 1 {
            return Err(ModelError::invariant(
                format!("{prefix}.size"),
                "must be >= 1",
            ));
        }
        if !(self.delay_fraction > 0.0 && self.delay_fraction <= 1.0) {
            return Err(ModelError::invariant(
                format!("{prefix}.delay_fraction"),
                "must be in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Durations recorded by one executor start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmRun {
    pub vm_index: u32,
    pub warmup_ns: Vec<u64>,
    pub measurement_ns: Vec<u64>,
}

impl VmRun {
    /// Per-repetition durations of the measurement iterations.
    pub fn per_repetition_ns(&self, repetitions: u64) -> impl Iterator<Item = f64> + '_ {
        let reps = repetitions as f64;
        self.measurement_ns.iter().map(move |&d| d as f64 / reps)
    }

    /// Warmup followed by measurement durations, in recording order.
    pub fn stream(&self) -> impl Iterator<Item = u64> + '_ {
        self.warmup_ns
            .iter()
            .chain(self.measurement_ns.iter())
            .copied()
    }
}

/// Recorded durations for one workload version.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub config: MeasurementConfig,
    pub workload: WorkloadSpec,
    pub timestamp: DateTime<Utc>,
    /// Provenance only; never consulted by decision logic.
    pub environment: BTreeMap<String, String>,
    pub vm_runs: Vec<VmRun>,
}

#[derive(Serialize, Deserialize)]
struct SeriesDocument {
    format_version: String,
    config: MeasurementConfig,
    workload: WorkloadSpec,
    timestamp: DateTime<Utc>,
    #[serde(default)]
    environment: BTreeMap<String, String>,
    vm_runs: Vec<VmRun>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<serde_json::Value>,
}

impl MeasurementSeries {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        self.workload.validate()?;
        if self.vm_runs.len() != self.config.vms as usize {
            return Err(ModelError::invariant(
                "vm_runs",
                format!(
                    "expected {} entries (config.vms), found {}",
                    self.config.vms,
                    self.vm_runs.len()
                ),
            ));
        }
        for (i, run) in self.vm_runs.iter().enumerate() {
            if run.vm_index as usize != i {
                return Err(ModelError::invariant(
                    format!("vm_runs[{i}].vm_index"),
                    format!("expected {i}, found {}", run.vm_index),
                ));
            }
            if run.warmup_ns.len() != self.config.warmup_iterations as usize {
                return Err(ModelError::invariant(
                    format!("vm_runs[{i}].warmup_ns"),
                    format!(
                        "expected {} entries, found {}",
                        self.config.warmup_iterations,
                        run.warmup_ns.len()
                    ),
                ));
            }
            if run.measurement_ns.len() != self.config.measurement_iterations as usize {
                return Err(ModelError::invariant(
                    format!("vm_runs[{i}].measurement_ns"),
                    format!(
                        "expected {} entries, found {}",
                        self.config.measurement_iterations,
                        run.measurement_ns.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>, ModelError> {
        self.validate()?;
        let doc = SeriesDocument {
            format_version: FORMAT_VERSION.to_string(),
            config: self.config,
            workload: self.workload,
            timestamp: self.timestamp,
            environment: self.environment.clone(),
            vm_runs: self.vm_runs.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&doc).map_err(|e| ModelError::Malformed {
            path: String::new(),
            message: e.to_string(),
        })?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ModelError> {
        let probe: VersionProbe =
            serde_json::from_slice(bytes).map_err(|e| ModelError::Malformed {
                path: String::new(),
                message: e.to_string(),
            })?;
        match probe.format_version {
            Some(serde_json::Value::String(v)) if v == FORMAT_VERSION => {}
            Some(other) => {
                return Err(ModelError::FormatVersion {
                    found: match other {
                        serde_json::Value::String(s) => s,
                        v => v.to_string(),
                    },
                })
            }
            None => {
                return Err(ModelError::Malformed {
                    path: "format_version".into(),
                    message: "missing field".into(),
                })
            }
        }
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let doc: SeriesDocument =
            serde_path_to_error::deserialize(de).map_err(|e| ModelError::Malformed {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        let series = MeasurementSeries {
            config: doc.config,
            workload: doc.workload,
            timestamp: doc.timestamp,
            environment: doc.environment,
            vm_runs: doc.vm_runs,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<(), crate::Error> {
        let bytes = self.to_json()?;
        std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self, crate::Error> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(MeasurementSeries::from_json(&bytes)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    WelchTTest,
    MannWhitney,
    ConfidenceIntervalOverlap,
}

impl std::str::FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" | "welch" | "t-test" => Ok(TestKind::WelchTTest),
            "mann-whitney" | "mw" | "mannwhitney" => Ok(TestKind::MannWhitney),
            "ci" | "confidence-interval" => Ok(TestKind::ConfidenceIntervalOverlap),
            other => Err(format!(
                "unknown test `{other}` (expected t, mann-whitney or ci)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierPolicy {
    None,
    ZScore { threshold: f64 },
}

/// Statistical test, significance level and outlier handling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub test: TestKind,
    pub alpha: f64,
    pub outlier_policy: OutlierPolicy,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            test: TestKind::MannWhitney,
            alpha: 0.01,
            outlier_policy: OutlierPolicy::None,
        }
    }
}

impl DecisionConfig {
    pub fn new(test: TestKind, alpha: f64) -> Self {
        DecisionConfig {
            test,
            alpha,
            outlier_policy: OutlierPolicy::None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ModelError::invariant("decision.alpha", "must be in (0, 1)"));
        }
        if let OutlierPolicy::ZScore { threshold } = self.outlier_policy {
            if !(threshold > 0.0) {
                return Err(ModelError::invariant(
                    "decision.outlier_policy.threshold",
                    "must be > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Aggregate over the per-VM mean per-repetition durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub per_vm_means_ns: Vec<f64>,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    /// `stddev_ns / mean_ns`.
    pub relative_stddev: f64,
}
