//! Child-side executor: one job per process.
//!
//! The parent writes a single JSON [`ExecutorJob`] to the child's standard
//! input. The child answers with one JSON [`ExecutorReply`] line as the last
//! line of its standard output and exits 0, or writes an
//! [`ExecutorFailure`] JSON document to standard error and exits nonzero.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::clock::{Clock, ClockSpec};
use crate::model::{MeasurementConfig, WorkloadSpec};
use crate::workloads::{MemoryBudget, Workload, WorkloadError, WorkloadInstance, WriteTarget};

/// Jobs started in this process. A fresh executor reads zero.
static JOBS_STARTED: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    Old,
    New,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorJob {
    pub vm_index: u32,
    pub version: Version,
    pub config: MeasurementConfig,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub write_target: WriteTarget,
    /// CPU to pin the executor to, if any.
    #[serde(default)]
    pub cpu: Option<usize>,
    pub memory_budget: MemoryBudget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorReply {
    pub vm_index: u32,
    pub version: Version,
    /// Jobs this process had started before this one; must be 0.
    pub prior_jobs: u64,
    pub warmup_ns: Vec<u64>,
    pub measurement_ns: Vec<u64>,
    pub pinned_cpu: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Protocol,
    Workload,
    Clock,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Protocol => 2,
            FailureKind::Workload => 3,
            FailureKind::Clock => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorFailure {
    pub kind: FailureKind,
    pub message: String,
    pub iteration: Option<u32>,
}

impl ExecutorFailure {
    fn workload(e: WorkloadError, iteration: Option<u32>) -> Self {
        ExecutorFailure {
            kind: FailureKind::Workload,
            message: e.to_string(),
            iteration,
        }
    }
}

/// Runs warmup then measurement iterations; each iteration times exactly
/// `repetitions` executions between two clock reads, then drains the sink.
pub fn run_job(job: &ExecutorJob, clock: &mut dyn Clock) -> Result<ExecutorReply, ExecutorFailure> {
    let prior_jobs = JOBS_STARTED.fetch_add(1, Ordering::SeqCst);
    job.config
        .validate()
        .and_then(|_| job.workload.validate())
        .map_err(|e| ExecutorFailure {
            kind: FailureKind::Protocol,
            message: e.to_string(),
            iteration: None,
        })?;
    job.memory_budget
        .check(&job.workload, &job.config)
        .map_err(|e| ExecutorFailure::workload(e, None))?;
    let pinned_cpu = job.cpu.filter(|&cpu| pin_to_cpu(cpu));

    let mut workload = WorkloadInstance::with_target(job.workload, job.write_target);
    let total = job.config.total_iterations();
    let mut durations = Vec::with_capacity(total as usize);
    for iteration in 0..total {
        let start = clock.now_ns();
        for _ in 0..job.config.repetitions {
            workload
                .execute_once()
                .map_err(|e| ExecutorFailure::workload(e, Some(iteration)))?;
        }
        let end = clock.now_ns();
        if end < start {
            return Err(ExecutorFailure {
                kind: FailureKind::Clock,
                message: format!("clock went backwards: start {start} ns, end {end} ns"),
                iteration: Some(iteration),
            });
        }
        durations.push(end - start);
        workload.drain_sink();
        if job.config.trigger_gc_between_iterations {
            workload.release_memory();
        }
    }
    let measurement_ns = durations.split_off(job.config.warmup_iterations as usize);
    Ok(ExecutorReply {
        vm_index: job.vm_index,
        version: job.version,
        prior_jobs,
        warmup_ns: durations,
        measurement_ns,
        pinned_cpu,
    })
}

#[cfg(target_os = "linux")]
fn pin_to_cpu(cpu: usize) -> bool {
    // SAFETY: cpu_set_t is plain data; sched_setaffinity only reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_to_cpu(_cpu: usize) -> bool {
    false
}

/// Entry point of the executor process. Returns the exit code.
pub fn serve(input: &mut dyn Read, output: &mut dyn Write, errors: &mut dyn Write) -> i32 {
    let result = read_job(input).and_then(|job| {
        let mut clock = job.clock.build();
        run_job(&job, clock.as_mut())
    });
    match result {
        Ok(reply) => {
            let line = serde_json::to_string(&reply).expect("reply serializes");
            // A leading newline separates the reply from Write workload output.
            if writeln!(output, "\n{line}")
                .and_then(|_| output.flush())
                .is_err()
            {
                return FailureKind::Protocol.exit_code();
            }
            0
        }
        Err(failure) => {
            let doc = serde_json::to_string(&failure).expect("failure serializes");
            let _ = writeln!(errors, "{doc}");
            failure.kind.exit_code()
        }
    }
}

fn read_job(input: &mut dyn Read) -> Result<ExecutorJob, ExecutorFailure> {
    let mut buf = String::new();
    input
        .read_to_string(&mut buf)
        .map_err(|e| ExecutorFailure {
            kind: FailureKind::Protocol,
            message: format!("reading job: {e}"),
            iteration: None,
        })?;
    serde_json::from_str(buf.trim()).map_err(|e| ExecutorFailure {
        kind: FailureKind::Protocol,
        message: format!("parsing job: {e}"),
        iteration: None,
    })
}
