//! Command-line interface.
//!
//! Exit codes: 0 success or no change, 10 change detected (`compare`),
//! 2 invalid input, 3 measurement or runtime failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::harness::clock::ClockSpec;
use crate::harness::{Harness, ProcessLauncher};
use crate::injection::{run_injection_study, summary_csv, StudyPlan, DEFAULT_DELTAS_NS};
use crate::model::{
    DecisionConfig, MeasurementConfig, MeasurementSeries, OutlierPolicy, TestKind, WorkloadKind,
    WorkloadSpec,
};
use crate::power::{curve_csv, feasibility, power_curve, required_vms, type_ii_error};
use crate::stats::{decide, summarize};
use crate::tuner::{
    record_pool, tune, write_report, Delta, RecordedPool, SyntheticSpec, TunerError, TunerPlan,
};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;
pub const EXIT_CHANGED: i32 = 10;

#[derive(Debug, Parser)]
#[command(
    name = "perfdelta",
    version,
    about = "Detect performance changes between two workload versions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure one workload over isolated executor starts.
    Measure(MeasureArgs),
    /// Compare two measured series.
    Compare(CompareArgs),
    /// Type II error, required VMs and time budget.
    Power(PowerArgs),
    /// Search the cheapest configuration that detects a small change.
    Tune(TuneArgs),
    /// Mean and standard deviation per workload size, as CSV.
    StddevSweep(SweepArgs),
    /// Inject busy-wait regressions and report detection rates.
    Inject(InjectArgs),
    /// Run one executor job read from standard input.
    #[command(hide = true)]
    Executor,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Executor starts (per version for paired runs).
    #[arg(long, default_value_t = 30)]
    pub vms: u32,
    #[arg(long, default_value_t = 49)]
    pub warmup: u32,
    /// Measurement iterations per executor start.
    #[arg(long, default_value_t = 49)]
    pub iterations: u32,
    #[arg(long, default_value_t = 100_000)]
    pub repetitions: u64,
    /// Release freed memory between iterations.
    #[arg(long)]
    pub gc: bool,
    /// Alternate old and new starts instead of running them in pairs.
    #[arg(long)]
    pub sequential: bool,
    /// Deterministic clock `START:STEP` in nanoseconds, for testing.
    #[arg(long, hide = true, value_parser = parse_fake_clock)]
    pub fake_clock: Option<ClockSpec>,
}

impl ConfigArgs {
    fn config(&self) -> MeasurementConfig {
        MeasurementConfig {
            vms: self.vms,
            warmup_iterations: self.warmup,
            measurement_iterations: self.iterations,
            repetitions: self.repetitions,
            trigger_gc_between_iterations: self.gc,
            parallel_pairs: !self.sequential,
        }
    }

    fn harness(&self) -> Result<Harness, Error> {
        let launcher = ProcessLauncher::current_exe()
            .map_err(|e| Error::io(Path::new("current executable"), e))?;
        Ok(Harness::new(launcher).with_clock(self.fake_clock.unwrap_or_default()))
    }
}

fn parse_fake_clock(s: &str) -> Result<ClockSpec, String> {
    let (start, step) = s.split_once(':').ok_or("expected START:STEP")?;
    Ok(ClockSpec::Fake {
        start_ns: start.trim().parse().map_err(|e| format!("start: {e}"))?,
        step_ns: step.trim().parse().map_err(|e| format!("step: {e}"))?,
    })
}

#[derive(Debug, Clone, Args)]
pub struct DecisionArgs {
    /// t, mann-whitney or ci.
    #[arg(long, default_value = "mann-whitney")]
    pub test: TestKind,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Drop per-VM means whose |z| exceeds this value before testing.
    #[arg(long)]
    pub outlier_z: Option<f64>,
}

impl DecisionArgs {
    fn decision(&self) -> DecisionConfig {
        DecisionConfig {
            test: self.test,
            alpha: self.alpha,
            outlier_policy: match self.outlier_z {
                Some(threshold) => OutlierPolicy::ZScore { threshold },
                None => OutlierPolicy::None,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub workload: WorkloadKind,
    #[arg(long)]
    pub size: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Busy-wait added to every operation.
    #[arg(long, default_value_t = 0)]
    pub delta_ns: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output series file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub old: PathBuf,
    pub new: PathBuf,
    #[command(flatten)]
    pub decision: DecisionArgs,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct PowerArgs {
    #[command(subcommand)]
    pub curve: Option<PowerCommand>,
    /// Effect size.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Print the Type II error at this VM count.
    #[arg(long, conflicts_with = "beta")]
    pub vms: Option<u64>,
    /// Print the VM count needed for this Type II error.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, requires = "budget")]
    pub seconds_per_vm: Option<f64>,
    /// Time budget in seconds.
    #[arg(long, requires = "seconds_per_vm")]
    pub budget: Option<f64>,
    /// Budget assumes old and new starts run simultaneously.
    #[arg(long)]
    pub parallel_pairs: bool,
}

#[derive(Debug, Subcommand)]
pub enum PowerCommand {
    /// Type II error over effect sizes and VM counts, as CSV.
    Curve {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,1,2")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        vms_min: u64,
        #[arg(long, default_value_t = 200)]
        vms_max: u64,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// One or more workload kinds; selection uses their average F1.
    #[arg(long, value_delimiter = ',', default_value = "add")]
    pub workload: Vec<WorkloadKind>,
    #[arg(long, default_value_t = 300)]
    pub size: u64,
    /// Operations added to the changed workload.
    #[arg(long, default_value_t = 1, conflicts_with = "delta_ns")]
    pub delta: u64,
    /// Busy-wait per operation in the changed workload instead of extra operations.
    #[arg(long)]
    pub delta_ns: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
    pub vm_grid: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,49")]
    pub iteration_grid: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    pub repetitions_grid: Vec<u64>,
    /// Recorded VMs per version; defaults to twice the largest VM count.
    #[arg(long)]
    pub max_vms: Option<u32>,
    /// Recorded warmup and measurement iterations; defaults to the largest iteration count.
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Gaussian pools `gamma=G[,mean=M][,vm_sd=S][,iteration_sd=T]` instead of measuring.
    #[arg(long)]
    pub synthetic: Option<SyntheticSpec>,
    /// Reuse pools recorded by an earlier run.
    #[arg(long, conflicts_with = "synthetic")]
    pub pools: Option<PathBuf>,
    #[arg(long, default_value_t = crate::tuner::DEFAULT_RESAMPLES)]
    pub resamples: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decision: DecisionArgs,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long, hide = true, value_parser = parse_fake_clock)]
    pub fake_clock: Option<ClockSpec>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub workload: WorkloadKind,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep each measured series as `<kind>-<size>.json` here.
    #[arg(long)]
    pub series_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[arg(long)]
    pub workload: WorkloadKind,
    #[arg(long, default_value_t = 300)]
    pub size: u64,
    /// Injected busy-wait per operation; one study per value.
    #[arg(long, value_delimiter = ',')]
    pub delta_ns: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    pub trials: u32,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub decision: DecisionArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of operations that receive the delay.
    #[arg(long, default_value_t = 1.0)]
    pub subset_fraction: f64,
    /// Run trials concurrently (timings then interfere).
    #[arg(long)]
    pub parallel_trials: bool,
    /// Study reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Measure(a) => measure(a),
        Command::Compare(a) => compare(a),
        Command::Power(a) => power(a),
        Command::Tune(a) => tune_command(a),
        Command::StddevSweep(a) => stddev_sweep(a),
        Command::Inject(a) => inject(a),
        Command::Executor => {
            let code = crate::harness::executor::serve(
                &mut std::io::stdin().lock(),
                &mut std::io::stdout().lock(),
                &mut std::io::stderr().lock(),
            );
            return code;
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error: 3 for executor and output failures, else 2.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Harness(h) if h.is_executor_failure() => EXIT_FAILURE,
        Error::Tuner(TunerError::Recording { source, .. }) if source.is_executor_failure() => {
            EXIT_FAILURE
        }
        _ => EXIT_INVALID,
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    crate::ModelError::invariant(path, message).into()
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, content: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn measure(a: MeasureArgs) -> Result<i32, Error> {
    let workload = WorkloadSpec::new(a.workload, a.size)
        .with_seed(a.seed)
        .with_delay_ns(a.delta_ns);
    let series = a
        .config
        .harness()?
        .run_campaign(&a.config.config(), &workload)?;
    series.write_to(&a.out)?;
    print_json(&summarize(&series)?)?;
    Ok(EXIT_OK)
}

fn compare(a: CompareArgs) -> Result<i32, Error> {
    let decision = a.decision.decision();
    decision.validate()?;
    let old = summarize(&MeasurementSeries::read_from(&a.old)?)?;
    let new = summarize(&MeasurementSeries::read_from(&a.new)?)?;
    let outcome = decide(&old.per_vm_means_ns, &new.per_vm_means_ns, &decision)?;
    print_json(&outcome)?;
    Ok(if outcome.changed {
        EXIT_CHANGED
    } else {
        EXIT_OK
    })
}

fn power(a: PowerArgs) -> Result<i32, Error> {
    if let Some(PowerCommand::Curve {
        gammas,
        vms_min,
        vms_max,
        alpha,
    }) = a.curve
    {
        if vms_min < 1 || vms_max < vms_min {
            return Err(invalid("vms_max", "need 1 <= vms-min <= vms-max"));
        }
        print!(
            "{}",
            curve_csv(&power_curve(&gammas, vms_min..=vms_max, alpha)?)
        );
        return Ok(EXIT_OK);
    }
    let gamma = a
        .gamma
        .ok_or_else(|| invalid("gamma", "--gamma is required"))?;
    match (a.vms, a.beta, a.seconds_per_vm.zip(a.budget)) {
        (Some(vms), None, None) => println!("{}", type_ii_error(gamma, vms, a.alpha)?),
        (None, Some(beta), None) => println!("{}", required_vms(gamma, a.alpha, beta)?),
        (None, Some(beta), Some((per_vm, budget))) => print_json(&feasibility(
            gamma,
            a.alpha,
            beta,
            per_vm,
            budget,
            a.parallel_pairs,
        )?)?,
        (Some(_), _, Some(_)) => return Err(invalid("budget", "budget needs --beta, not --vms")),
        _ => return Err(invalid("vms", "give exactly one of --vms or --beta")),
    }
    Ok(EXIT_OK)
}

fn tune_command(a: TuneArgs) -> Result<i32, Error> {
    let mut plan = TunerPlan::new(
        a.workload.first().copied().unwrap_or(WorkloadKind::Add),
        a.size,
        a.vm_grid,
        a.iteration_grid,
        a.repetitions_grid,
    );
    plan.workloads = a.workload;
    plan.delta = match a.delta_ns {
        Some(ns) => Delta::Nanoseconds(ns),
        None => Delta::Operations(a.delta),
    };
    if let Some(v) = a.max_vms {
        plan.max_vms = v;
    }
    if let Some(i) = a.max_iterations {
        plan.max_iterations = i;
    }
    plan.resamples = a.resamples;
    plan.seed = a.seed;
    plan.decision = a.decision.decision();
    plan.parallel_pairs = !a.sequential;
    plan.validate().map_err(Error::Tuner)?;

    let started = Instant::now();
    let pool_dir = a.out.join("pool");
    let pools = if let Some(spec) = a.synthetic {
        let pools = spec.pools(&plan)?;
        for p in &pools {
            p.write_to(&pool_dir)?;
        }
        pools
    } else if let Some(dir) = &a.pools {
        let mut pools = Vec::new();
        for &kind in &plan.workloads {
            for &reps in &plan.repetitions_grid {
                pools.push(RecordedPool::read_from(dir, kind, reps)?);
            }
        }
        pools
    } else {
        let launcher = ProcessLauncher::current_exe()
            .map_err(|e| Error::io(Path::new("current executable"), e))?;
        let harness = Harness::new(launcher).with_clock(a.fake_clock.unwrap_or_default());
        plan.decision.validate()?;
        let pools = record_pool(&plan, &harness)?;
        for p in &pools {
            p.write_to(&pool_dir)?;
        }
        pools
    };
    let mut report = tune(&plan, &pools)?;
    report.synthetic = a.synthetic;
    write_report(&report, started.elapsed().as_secs_f64(), &a.out)?;
    print_json(&report.selection)?;
    Ok(EXIT_OK)
}

fn stddev_sweep(a: SweepArgs) -> Result<i32, Error> {
    let config = a.config.config();
    let harness = a.config.harness()?;
    let specs: Vec<WorkloadSpec> = a
        .sizes
        .iter()
        .map(|&size| WorkloadSpec::new(a.workload, size).with_seed(a.seed))
        .collect();
    config.validate()?;
    for spec in &specs {
        spec.validate()?;
        harness.memory_budget.check(spec, &config)?;
    }
    let mut csv = String::from("kind,size,mean_ns,stddev_ns,relative_stddev\n");
    for spec in &specs {
        let series = harness.run_campaign(&config, spec)?;
        if let Some(dir) = &a.series_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            series.write_to(&dir.join(format!("{}-{}.json", spec.kind, spec.size)))?;
        }
        let s = summarize(&series)?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            spec.kind, spec.size, s.mean_ns, s.stddev_ns, s.relative_stddev
        ));
    }
    print!("{csv}");
    Ok(EXIT_OK)
}

fn inject(a: InjectArgs) -> Result<i32, Error> {
    let harness = a.config.harness()?;
    let deltas = if a.delta_ns.is_empty() {
        DEFAULT_DELTAS_NS.to_vec()
    } else {
        a.delta_ns.clone()
    };
    let mut reports = Vec::with_capacity(deltas.len());
    for delta_ns in deltas {
        let mut plan = StudyPlan::new(
            WorkloadSpec::new(a.workload, a.size),
            delta_ns,
            a.config.config(),
            a.trials,
        );
        plan.decision = a.decision.decision();
        plan.seed = a.seed;
        plan.subset_fraction = a.subset_fraction;
        plan.parallel_trials = a.parallel_trials;
        reports.push(run_injection_study(&harness, &plan)?);
    }
    if let Some(out) = &a.out {
        let mut json = serde_json::to_string_pretty(&reports).expect("serializable");
        json.push('\n');
        write_file(out, &json)?;
    }
    print!("{}", summary_csv(&reports));
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn fake_clock_parses() {
        assert_eq!(
            parse_fake_clock("5:100").unwrap(),
            ClockSpec::Fake {
                start_ns: 5,
                step_ns: 100
            }
        );
        assert!(parse_fake_clock("5").is_err());
    }

    #[test]
    fn defaults_match_recommended_configuration() {
        let cli = Cli::try_parse_from([
            "perfdelta",
            "measure",
            "--workload",
            "add",
            "--size",
            "1",
            "--out",
            "x",
        ])
        .unwrap();
        let Command::Measure(m) = cli.command else {
            panic!()
        };
        assert_eq!(m.config.config(), MeasurementConfig::default());
    }

    #[test]
    fn power_forward_and_inverse() {
        assert_eq!(
            run(["perfdelta", "power", "--gamma", "1", "--vms", "30"]),
            0
        );
        assert_eq!(
            run(["perfdelta", "power", "--gamma", "0.5", "--beta", "0.01"]),
            0
        );
        assert_eq!(run(["perfdelta", "power", "--vms", "30"]), EXIT_INVALID);
        assert_eq!(run(["perfdelta", "power", "--gamma", "1"]), EXIT_INVALID);
    }
}
