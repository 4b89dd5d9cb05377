//! Measurement campaigns over isolated executor processes.
//!
//! Every VM start is a fresh child process running [`executor::run_job`].
//! The coordinator is single-threaded and runs at most one pair of
//! executors at a time.

pub mod clock;
pub mod executor;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::OnceLock;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MeasurementConfig, MeasurementSeries, ModelError, VmRun, WorkloadSpec};
use crate::workloads::{MemoryBudget, WorkloadError, WriteTarget};
use clock::ClockSpec;
pub use executor::{ExecutorFailure, ExecutorJob, ExecutorReply, FailureKind, Version};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Budget(#[from] WorkloadError),
    #[error("old and new workloads must share a kind ({old} vs {new})")]
    KindMismatch { old: String, new: String },
    #[error("executor for {version:?} vm {vm_index} failed (exit {exit_code:?}): {diagnostics}")]
    Executor {
        vm_index: u32,
        version: Version,
        exit_code: Option<i32>,
        diagnostics: String,
    },
    #[error("clock went backwards in {version:?} vm {vm_index}: {diagnostics}")]
    NonMonotonicClock {
        vm_index: u32,
        version: Version,
        diagnostics: String,
    },
    #[error("executor for {version:?} vm {vm_index} was not fresh ({prior_jobs} earlier jobs)")]
    NotIsolated {
        vm_index: u32,
        version: Version,
        prior_jobs: u64,
    },
    #[error("could not start executor `{program}`: {source}")]
    Spawn {
        program: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Whether the failure came from an executor rather than input validation.
    pub fn is_executor_failure(&self) -> bool {
        !matches!(
            self,
            HarnessError::Invalid(_) | HarnessError::Budget(_) | HarnessError::KindMismatch { .. }
        )
    }
}

/// Starts the executors of one launch epoch simultaneously and waits for
/// all of them.
pub trait Launcher: Send + Sync {
    fn launch(&self, jobs: &[ExecutorJob]) -> Vec<Result<ExecutorReply, HarnessError>>;
}

/// Launches `program args...` once per job.
#[derive(Debug, Clone)]
pub struct ProcessLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ProcessLauncher {
    /// `program executor`, the executor subcommand of the CLI binary.
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ProcessLauncher {
            program: program.into(),
            args: vec!["executor".into()],
        }
    }

    /// The running binary's own executor subcommand.
    pub fn current_exe() -> std::io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?))
    }
}

struct Running {
    child: std::process::Child,
    stdout: std::thread::JoinHandle<String>,
    stderr: std::thread::JoinHandle<String>,
}

impl ProcessLauncher {
    fn spawn(&self, job: &ExecutorJob) -> Result<Running, HarnessError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| HarnessError::Spawn {
                program: self.program.clone(),
                source,
            })?;
        let doc = serde_json::to_vec(job).expect("job serializes");
        if let Some(mut stdin) = child.stdin.take() {
            // A child that died early surfaces through its exit status.
            let _ = stdin.write_all(&doc).and_then(|_| stdin.write_all(b"\n"));
        }
        let out = child.stdout.take().expect("piped stdout");
        let err = child.stderr.take().expect("piped stderr");
        let stdout = std::thread::spawn(move || {
            // Only the last non-empty line matters; workload text may precede it.
            let mut last = String::new();
            for line in BufReader::new(out).lines() {
                match line {
                    Ok(l) if !l.trim().is_empty() => last = l,
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
            last
        });
        let stderr = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = BufReader::new(err).take(64 * 1024).read_to_string(&mut s);
            s
        });
        Ok(Running {
            child,
            stdout,
            stderr,
        })
    }

    fn finish(job: &ExecutorJob, mut running: Running) -> Result<ExecutorReply, HarnessError> {
        let status = running.child.wait();
        let last = running.stdout.join().unwrap_or_default();
        let diagnostics = running.stderr.join().unwrap_or_default().trim().to_string();
        let status = status.map_err(|e| HarnessError::Executor {
            vm_index: job.vm_index,
            version: job.version,
            exit_code: None,
            diagnostics: e.to_string(),
        })?;
        if !status.success() {
            let failure: Option<ExecutorFailure> = diagnostics
                .lines()
                .rev()
                .find_map(|l| serde_json::from_str(l).ok());
            if let Some(f) = &failure {
                if f.kind == FailureKind::Clock {
                    return Err(HarnessError::NonMonotonicClock {
                        vm_index: job.vm_index,
                        version: job.version,
                        diagnostics: f.message.clone(),
                    });
                }
            }
            return Err(HarnessError::Executor {
                vm_index: job.vm_index,
                version: job.version,
                exit_code: status.code(),
                diagnostics: failure.map(|f| f.message).unwrap_or(diagnostics),
            });
        }
        serde_json::from_str(&last).map_err(|e| HarnessError::Executor {
            vm_index: job.vm_index,
            version: job.version,
            exit_code: status.code(),
            diagnostics: format!("unreadable result line ({e}): {last:.200}"),
        })
    }
}

impl Launcher for ProcessLauncher {
    fn launch(&self, jobs: &[ExecutorJob]) -> Vec<Result<ExecutorReply, HarnessError>> {
        let running: Vec<_> = jobs.iter().map(|j| self.spawn(j)).collect();
        jobs.iter()
            .zip(running)
            .map(|(job, r)| r.and_then(|r| Self::finish(job, r)))
            .collect()
    }
}

/// One executor start within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSlot {
    pub version: Version,
    pub vm_index: u32,
}

/// Executors started together.
pub type LaunchEpoch = Vec<LaunchSlot>;

#[derive(Debug, Clone)]
pub struct PairedCampaign {
    pub old: MeasurementSeries,
    pub new: MeasurementSeries,
    pub epochs: Vec<LaunchEpoch>,
}

/// Coordinates campaigns through a [`Launcher`].
pub struct Harness {
    launcher: Box<dyn Launcher>,
    pub clock: ClockSpec,
    pub write_target: WriteTarget,
    pub memory_budget: MemoryBudget,
    /// Pin the two members of a parallel pair to distinct CPUs.
    pub pin_pairs: bool,
}

impl Harness {
    pub fn new(launcher: impl Launcher + 'static) -> Self {
        Harness {
            launcher: Box::new(launcher),
            clock: ClockSpec::Monotonic,
            write_target: WriteTarget::Null,
            memory_budget: MemoryBudget::from_env(),
            pin_pairs: true,
        }
    }

    pub fn with_clock(mut self, clock: ClockSpec) -> Self {
        self.clock = clock;
        self
    }

    fn job(
        &self,
        vm_index: u32,
        version: Version,
        config: &MeasurementConfig,
        workload: &WorkloadSpec,
    ) -> ExecutorJob {
        ExecutorJob {
            vm_index,
            version,
            config: *config,
            workload: *workload,
            clock: self.clock,
            write_target: self.write_target,
            cpu: None,
            memory_budget: self.memory_budget,
        }
    }

    fn precheck(
        &self,
        config: &MeasurementConfig,
        workload: &WorkloadSpec,
    ) -> Result<(), HarnessError> {
        config.validate()?;
        workload.validate()?;
        self.memory_budget.check(workload, config)?;
        Ok(())
    }

    fn accept(job: &ExecutorJob, reply: ExecutorReply) -> Result<VmRun, HarnessError> {
        if reply.prior_jobs != 0 {
            return Err(HarnessError::NotIsolated {
                vm_index: job.vm_index,
                version: job.version,
                prior_jobs: reply.prior_jobs,
            });
        }
        if reply.vm_index != job.vm_index
            || reply.warmup_ns.len() != job.config.warmup_iterations as usize
            || reply.measurement_ns.len() != job.config.measurement_iterations as usize
        {
            return Err(HarnessError::Executor {
                vm_index: job.vm_index,
                version: job.version,
                exit_code: Some(0),
                diagnostics: "result does not match the job".into(),
            });
        }
        Ok(VmRun {
            vm_index: reply.vm_index,
            warmup_ns: reply.warmup_ns,
            measurement_ns: reply.measurement_ns,
        })
    }

    fn series(
        &self,
        config: MeasurementConfig,
        workload: WorkloadSpec,
        vm_runs: Vec<VmRun>,
        pinning: &str,
    ) -> MeasurementSeries {
        let mut environment = environment_metadata();
        environment.insert("cpu_pinning".into(), pinning.into());
        if let ClockSpec::Fake { .. } = self.clock {
            environment.insert("clock".into(), "fake".into());
        }
        MeasurementSeries {
            config,
            workload,
            timestamp: Utc::now(),
            environment,
            vm_runs,
        }
    }

    /// Runs `config.vms` executors one after another.
    pub fn run_campaign(
        &self,
        config: &MeasurementConfig,
        workload: &WorkloadSpec,
    ) -> Result<MeasurementSeries, HarnessError> {
        self.precheck(config, workload)?;
        let mut runs = Vec::with_capacity(config.vms as usize);
        for vm in 0..config.vms {
            let job = self.job(vm, Version::Single, config, workload);
            let reply = self
                .launcher
                .launch(std::slice::from_ref(&job))
                .pop()
                .expect("one result per job")?;
            runs.push(Self::accept(&job, reply)?);
        }
        let series = self.series(*config, *workload, runs, "none");
        series.validate()?;
        Ok(series)
    }

    /// Measures both versions with aligned VM indices: simultaneous pairs
    /// when `config.parallel_pairs`, else alternating old/new starts.
    pub fn run_paired_campaign(
        &self,
        config: &MeasurementConfig,
        old: &WorkloadSpec,
        new: &WorkloadSpec,
    ) -> Result<PairedCampaign, HarnessError> {
        if old.kind != new.kind {
            return Err(HarnessError::KindMismatch {
                old: old.kind.to_string(),
                new: new.kind.to_string(),
            });
        }
        self.precheck(config, old)?;
        self.precheck(config, new)?;
        let cpus = if config.parallel_pairs && self.pin_pairs {
            let cpus = pair_cpus();
            if cpus.is_none() {
                log::warn!(
                    "CPU affinity unavailable or fewer than two CPUs; parallel pairs run unpinned"
                );
            }
            cpus
        } else {
            None
        };
        let mut old_runs = Vec::with_capacity(config.vms as usize);
        let mut new_runs = Vec::with_capacity(config.vms as usize);
        let mut epochs = Vec::new();
        for vm in 0..config.vms {
            let mut old_job = self.job(vm, Version::Old, config, old);
            let mut new_job = self.job(vm, Version::New, config, new);
            let groups: Vec<Vec<ExecutorJob>> = if config.parallel_pairs {
                if let Some((a, b)) = cpus {
                    old_job.cpu = Some(a);
                    new_job.cpu = Some(b);
                }
                vec![vec![old_job, new_job]]
            } else {
                vec![vec![old_job], vec![new_job]]
            };
            for group in groups {
                epochs.push(
                    group
                        .iter()
                        .map(|j| LaunchSlot {
                            version: j.version,
                            vm_index: j.vm_index,
                        })
                        .collect(),
                );
                let results = self.launcher.launch(&group);
                for (job, result) in group.iter().zip(results) {
                    let run = Self::accept(job, result?)?;
                    match job.version {
                        Version::New => new_runs.push(run),
                        _ => old_runs.push(run),
                    }
                }
            }
        }
        let pinning = match cpus {
            Some((a, b)) => format!("cpu{a}/cpu{b}"),
            None => "none".into(),
        };
        let old = self.series(*config, *old, old_runs, &pinning);
        let new = self.series(*config, *new, new_runs, &pinning);
        old.validate()?;
        new.validate()?;
        Ok(PairedCampaign { old, new, epochs })
    }
}

/// First two CPUs this process may run on.
#[cfg(target_os = "linux")]
fn pair_cpus() -> Option<(usize, usize)> {
    // SAFETY: sched_getaffinity fills the zeroed set we own.
    let set = unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return None;
        }
        set
    };
    let mut allowed =
        (0..libc::CPU_SETSIZE as usize).filter(|&c| unsafe { libc::CPU_ISSET(c, &set) });
    Some((allowed.next()?, allowed.next()?))
}

#[cfg(not(target_os = "linux"))]
fn pair_cpus() -> Option<(usize, usize)> {
    None
}

/// Provenance recorded with every series.
pub fn environment_metadata() -> BTreeMap<String, String> {
    static RESOLUTION: OnceLock<u64> = OnceLock::new();
    let resolution = *RESOLUTION.get_or_init(clock::measure_resolution_ns);
    let mut env = BTreeMap::new();
    env.insert("os".into(), std::env::consts::OS.into());
    env.insert("arch".into(), std::env::consts::ARCH.into());
    env.insert(
        "cpu_model".into(),
        cpu_model().unwrap_or_else(|| "unknown".into()),
    );
    env.insert(
        "logical_cpus".into(),
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .to_string(),
    );
    env.insert("clock_resolution_ns".into(), resolution.to_string());
    env.insert("perfdelta_version".into(), env!("CARGO_PKG_VERSION").into());
    env.insert("executor".into(), "process".into());
    env
}

fn cpu_model() -> Option<String> {
    let info = std::fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split_once(':'))
        .map(|(_, v)| v.trim().to_string())
}
