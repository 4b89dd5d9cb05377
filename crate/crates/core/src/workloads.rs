//! Calibration workloads: addition, allocation and text output of
//! pseudo-random numbers, with optional busy-wait injection per operation.
//!
//! Random numbers come from SplitMix64:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! seeded with `WorkloadSpec::seed`, so every implementation following the
//! recurrence produces the same Add checksum.

use std::alloc::{alloc, Layout};
use std::fmt::Write as _;
use std::hint::black_box;
use std::io::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MeasurementConfig, WorkloadKind, WorkloadSpec};

/// Environment variable overriding the allocation budget in bytes.
pub const MEM_BUDGET_ENV: &str = "PERFDELTA_MEM_BUDGET_BYTES";

/// Estimated retained bytes per Allocate record: 24 payload bytes, the
/// pointer kept in the sink and the allocator's header.
pub const BYTES_PER_RECORD: u64 = 40;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error(
        "allocate workload needs about {required} bytes per iteration \
         ({records} records), budget is {budget} bytes (override with {MEM_BUDGET_ENV})"
    )]
    BudgetExceeded {
        required: u64,
        records: u64,
        budget: u64,
    },
    #[error("allocation of {requested} bytes failed after {retained} retained records")]
    AllocationFailed { requested: usize, retained: usize },
    #[error("writing workload output failed: {0}")]
    Output(String),
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Spins on the monotonic clock until `ns` nanoseconds have elapsed.
#[inline]
pub fn busy_wait(ns: u64) {
    let start = Instant::now();
    let target = Duration::from_nanos(ns);
    while start.elapsed() < target {
        std::hint::spin_loop();
    }
}

/// Smallest observable cost of a busy-wait call, in nanoseconds.
pub fn busy_wait_quantum_ns(samples: usize) -> u64 {
    (0..samples.max(1))
        .map(|_| {
            let t = Instant::now();
            busy_wait(1);
            t.elapsed().as_nanos() as u64
        })
        .min()
        .unwrap_or(0)
}

/// Where the Write workload sends its text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WriteTarget {
    /// Formatted into a reusable buffer that is then discarded.
    #[default]
    Null,
    Stdout,
}

/// Allocation limit for the Allocate workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub bytes: u64,
}

impl MemoryBudget {
    /// `PERFDELTA_MEM_BUDGET_BYTES`, else a quarter of physical memory.
    pub fn from_env() -> Self {
        if let Some(bytes) = std::env::var(MEM_BUDGET_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
        {
            return MemoryBudget { bytes };
        }
        MemoryBudget {
            bytes: physical_memory_bytes() / 4,
        }
    }

    /// Rejects Allocate runs whose per-iteration retained records exceed
    /// the budget. Other kinds always pass.
    pub fn check(
        &self,
        workload: &WorkloadSpec,
        config: &MeasurementConfig,
    ) -> Result<(), WorkloadError> {
        if workload.kind != WorkloadKind::Allocate {
            return Ok(());
        }
        let records = workload.size.saturating_mul(config.repetitions);
        let required = records.saturating_mul(BYTES_PER_RECORD);
        if required > self.bytes {
            return Err(WorkloadError::BudgetExceeded {
                required,
                records,
                budget: self.bytes,
            });
        }
        Ok(())
    }
}

fn physical_memory_bytes() -> u64 {
    const FALLBACK: u64 = 4 << 30;
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemTotal:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .unwrap_or(FALLBACK)
}

/// Extension seam for workloads run by the executor.
pub trait Workload {
    fn execute_once(&mut self) -> Result<(), WorkloadError>;
    /// Consumes the sink through an optimization barrier and releases its
    /// allocations. Called between iterations only.
    fn drain_sink(&mut self);
    /// Additionally returns freed capacity to the system allocator.
    fn release_memory(&mut self) {}
}

type Record = [u64; 3];

/// A workload bound to its spec, random stream and sink.
#[derive(Debug)]
pub struct WorkloadInstance {
    spec: WorkloadSpec,
    rng: SplitMix64,
    delay_mask: Option<Vec<bool>>,
    sum: u64,
    #[allow(clippy::vec_box)]
    records: Vec<Box<Record>>,
    text: String,
    bytes_written: u64,
    target: WriteTarget,
}

impl WorkloadInstance {
    pub fn new(spec: WorkloadSpec) -> Self {
        Self::with_target(spec, WriteTarget::Null)
    }

    pub fn with_target(spec: WorkloadSpec, target: WriteTarget) -> Self {
        let delay_mask = (spec.injected_delay_ns > 0 && spec.delay_fraction < 1.0).then(|| {
            // Independent stream so the workload's own numbers are unaffected.
            let mut rng = SplitMix64::new(spec.seed ^ 0xD1B5_4A32_D192_ED03);
            (0..spec.size)
                .map(|_| {
                    ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) < spec.delay_fraction
                })
                .collect()
        });
        WorkloadInstance {
            spec,
            rng: SplitMix64::new(spec.seed),
            delay_mask,
            sum: 0,
            records: Vec::new(),
            text: String::with_capacity(32),
            bytes_written: 0,
            target,
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Add checksum accumulated since the last drain.
    pub fn sum(&self) -> u64 {
        self.sum
    }

    pub fn retained_records(&self) -> usize {
        self.records.len()
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    #[inline]
    fn maybe_delay(&self, op: usize) {
        let delay = self.spec.injected_delay_ns;
        if delay == 0 {
            return;
        }
        match &self.delay_mask {
            Some(mask) if !mask[op] => {}
            _ => busy_wait(delay),
        }
    }

    fn allocate_record(&mut self, value: u64) -> Result<(), WorkloadError> {
        let layout = Layout::new::<Record>();
        if self.records.try_reserve(1).is_err() {
            return Err(WorkloadError::AllocationFailed {
                requested: std::mem::size_of::<Box<Record>>() * (self.records.len() + 1),
                retained: self.records.len(),
            });
        }
        // SAFETY: layout has non-zero size; the pointer is checked for null,
        // initialized, and handed to Box which frees it with the same layout.
        let record = unsafe {
            let ptr = alloc(layout) as *mut Record;
            if ptr.is_null() {
                return Err(WorkloadError::AllocationFailed {
                    requested: layout.size(),
                    retained: self.records.len(),
                });
            }
            ptr.write([value, value >> 1, value >> 2]);
            Box::from_raw(ptr)
        };
        self.records.push(record);
        Ok(())
    }
}

impl Workload for WorkloadInstance {
    fn execute_once(&mut self) -> Result<(), WorkloadError> {
        let size = self.spec.size as usize;
        match self.spec.kind {
            WorkloadKind::Add => {
                let mut acc = self.sum;
                for op in 0..size {
                    acc = acc.wrapping_add(self.rng.next_u64());
                    self.maybe_delay(op);
                }
                self.sum = black_box(acc);
            }
            WorkloadKind::Allocate => {
                for op in 0..size {
                    let v = self.rng.next_u64();
                    self.allocate_record(v)?;
                    self.maybe_delay(op);
                }
            }
            WorkloadKind::Write => {
                let stdout = std::io::stdout();
                let mut lock = (self.target == WriteTarget::Stdout).then(|| stdout.lock());
                for op in 0..size {
                    let v = self.rng.next_u64();
                    self.text.clear();
                    let _ = writeln!(self.text, "{v}");
                    match lock.as_mut() {
                        Some(out) => out
                            .write_all(self.text.as_bytes())
                            .map_err(|e| WorkloadError::Output(e.to_string()))?,
                        None => {
                            black_box(self.text.as_bytes());
                        }
                    }
                    self.bytes_written += self.text.len() as u64;
                    self.maybe_delay(op);
                }
            }
        }
        Ok(())
    }

    fn drain_sink(&mut self) {
        black_box(self.sum);
        self.sum = 0;
        black_box(&self.records);
        self.records.clear();
        black_box(self.bytes_written);
    }

    fn release_memory(&mut self) {
        self.records.shrink_to_fit();
        self.text.shrink_to(32);
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: malloc_trim only returns free heap pages to the OS.
        unsafe {
            libc::malloc_trim(0);
        }
    }
}
