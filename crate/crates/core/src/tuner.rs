//! Configuration search by resampling a recorded measurement pool.
//!
//! A pool holds the maximal configuration measured for a base workload and a
//! slightly changed one. Every smaller configuration `(vms, iterations,
//! repetitions)` is evaluated by repeatedly drawing VMs from the pool,
//! deciding "changed" for base vs changed samples (true positives) and for
//! two base samples (false positives), and scoring the detector with F1.
//!
//! A configuration with `i` iterations consumes recorded iterations
//! `1..=2i` of each VM and discards the first `i` as warmup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{Harness, HarnessError};
use crate::model::{
    DecisionConfig, MeasurementConfig, MeasurementSeries, VmRun, WorkloadKind, WorkloadSpec,
};
use crate::stats::{decide, StatsError};

/// Minimum F1 for a configuration to qualify.
pub const F1_THRESHOLD: f64 = 0.99;
/// Allowed F1 drop when iterations grow.
pub const MONOTONICITY_TOLERANCE: f64 = 0.005;
pub const DEFAULT_RESAMPLES: u32 = 10_000;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid plan: {field}: {message}")]
    Plan {
        field: &'static str,
        message: String,
    },
    #[error("pool has {available} VMs, {needed} requested")]
    TooFewVms { needed: usize, available: usize },
    #[error("pool has {available} iterations per VM, {needed} requested")]
    TooShallow { needed: usize, available: usize },
    #[error("no recorded pool for {kind} at {repetitions} repetitions")]
    MissingPool {
        kind: WorkloadKind,
        repetitions: u64,
    },
    #[error("recording {variant} {kind} at {repetitions} repetitions failed: {source}")]
    Recording {
        kind: WorkloadKind,
        repetitions: u64,
        variant: &'static str,
        #[source]
        source: HarnessError,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn plan_error(field: &'static str, message: impl Into<String>) -> TunerError {
    TunerError::Plan {
        field,
        message: message.into(),
    }
}

/// The change between base and changed workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    /// Extra primitive operations: size `s + d`.
    Operations(u64),
    /// Busy-wait per operation, in nanoseconds.
    Nanoseconds(u64),
}

impl Delta {
    pub fn apply(self, base: WorkloadSpec) -> WorkloadSpec {
        match self {
            Delta::Operations(d) => WorkloadSpec {
                size: base.size + d,
                ..base
            },
            Delta::Nanoseconds(ns) => base.with_delay_ns(ns),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerPlan {
    pub workloads: Vec<WorkloadKind>,
    pub size: u64,
    pub delta: Delta,
    pub repetitions_grid: Vec<u64>,
    pub max_vms: u32,
    pub max_iterations: u32,
    pub vm_grid: Vec<u32>,
    pub iteration_grid: Vec<u32>,
    pub resamples: u32,
    pub decision: DecisionConfig,
    pub seed: u64,
    pub parallel_pairs: bool,
}

impl TunerPlan {
    /// A plan whose pool bounds are the grid maxima; same-version trials
    /// get disjoint subsets because `max_vms` is twice the largest v.
    pub fn new(
        workload: WorkloadKind,
        size: u64,
        vm_grid: Vec<u32>,
        iteration_grid: Vec<u32>,
        repetitions_grid: Vec<u64>,
    ) -> Self {
        let max_vms = vm_grid.iter().copied().max().unwrap_or(0).saturating_mul(2);
        let max_iterations = iteration_grid.iter().copied().max().unwrap_or(0);
        TunerPlan {
            workloads: vec![workload],
            size,
            delta: Delta::Operations(1),
            repetitions_grid,
            max_vms,
            max_iterations,
            vm_grid,
            iteration_grid,
            resamples: DEFAULT_RESAMPLES,
            decision: DecisionConfig::default(),
            seed: 0,
            parallel_pairs: true,
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        if self.workloads.is_empty() {
            return Err(plan_error("workloads", "must not be empty"));
        }
        if self.vm_grid.is_empty()
            || self.iteration_grid.is_empty()
            || self.repetitions_grid.is_empty()
        {
            return Err(plan_error(
                "grids",
                "vm, iteration and repetitions grids must not be empty",
            ));
        }
        if self.vm_grid.iter().any(|&v| v < 2) {
            return Err(plan_error("vm_grid", "every entry must be >= 2"));
        }
        if self.iteration_grid.contains(&0) {
            return Err(plan_error("iteration_grid", "every entry must be >= 1"));
        }
        if self.repetitions_grid.contains(&0) {
            return Err(plan_error("repetitions_grid", "every entry must be >= 1"));
        }
        let max_v = *self.vm_grid.iter().max().expect("non-empty");
        if max_v > self.max_vms {
            return Err(plan_error(
                "vm_grid",
                format!("{max_v} exceeds max_vms {}", self.max_vms),
            ));
        }
        let max_i = *self.iteration_grid.iter().max().expect("non-empty");
        if max_i > self.max_iterations {
            return Err(plan_error(
                "iteration_grid",
                format!("{max_i} exceeds max_iterations {}", self.max_iterations),
            ));
        }
        if self.resamples == 0 {
            return Err(plan_error("resamples", "must be >= 1"));
        }
        self.decision
            .validate()
            .map_err(|e| plan_error("decision", e.to_string()))?;
        let base = self.base_workload(self.workloads[0]);
        base.validate()
            .map_err(|e| plan_error("size", e.to_string()))?;
        self.delta
            .apply(base)
            .validate()
            .map_err(|e| plan_error("delta", e.to_string()))?;
        Ok(())
    }

    pub fn base_workload(&self, kind: WorkloadKind) -> WorkloadSpec {
        WorkloadSpec::new(kind, self.size).with_seed(self.seed)
    }

    pub fn changed_workload(&self, kind: WorkloadKind) -> WorkloadSpec {
        self.delta.apply(self.base_workload(kind))
    }

    /// Recording configuration for one repetitions value.
    pub fn pool_config(&self, repetitions: u64) -> MeasurementConfig {
        MeasurementConfig {
            vms: self.max_vms,
            warmup_iterations: self.max_iterations,
            measurement_iterations: self.max_iterations,
            repetitions,
            trigger_gc_between_iterations: false,
            parallel_pairs: self.parallel_pairs,
        }
    }

    fn sorted_grid(&self) -> Vec<(u32, u32, u64)> {
        let mut cells: Vec<_> = self
            .vm_grid
            .iter()
            .flat_map(|&v| {
                self.iteration_grid
                    .iter()
                    .flat_map(move |&i| self.repetitions_grid.iter().map(move |&r| (v, i, r)))
            })
            .collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

/// Recorded base and changed series for one workload and repetitions value.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedPool {
    pub kind: WorkloadKind,
    pub repetitions: u64,
    pub base: MeasurementSeries,
    pub changed: MeasurementSeries,
}

impl RecordedPool {
    fn file_stem(kind: WorkloadKind, repetitions: u64) -> String {
        format!("{kind}-r{repetitions}")
    }

    /// Writes `<kind>-r<reps>-base.json` and `-changed.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> crate::Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let stem = Self::file_stem(self.kind, self.repetitions);
        self.base.write_to(&dir.join(format!("{stem}-base.json")))?;
        self.changed
            .write_to(&dir.join(format!("{stem}-changed.json")))?;
        Ok(())
    }

    pub fn read_from(dir: &Path, kind: WorkloadKind, repetitions: u64) -> crate::Result<Self> {
        let stem = Self::file_stem(kind, repetitions);
        Ok(RecordedPool {
            kind,
            repetitions,
            base: MeasurementSeries::read_from(&dir.join(format!("{stem}-base.json")))?,
            changed: MeasurementSeries::read_from(&dir.join(format!("{stem}-changed.json")))?,
        })
    }
}

/// Runs the harness at the plan's maximal configuration for every workload
/// and repetitions value.
pub fn record_pool(plan: &TunerPlan, harness: &Harness) -> Result<Vec<RecordedPool>, TunerError> {
    plan.validate()?;
    let mut pools = Vec::new();
    for &kind in &plan.workloads {
        for &repetitions in &plan.repetitions_grid {
            let config = plan.pool_config(repetitions);
            log::info!("recording {kind} at {repetitions} repetitions");
            let paired = harness
                .run_paired_campaign(
                    &config,
                    &plan.base_workload(kind),
                    &plan.changed_workload(kind),
                )
                .map_err(|source| TunerError::Recording {
                    kind,
                    repetitions,
                    variant: if matches!(
                        source,
                        HarnessError::Executor {
                            version: crate::harness::Version::New,
                            ..
                        }
                    ) {
                        "changed"
                    } else {
                        "base"
                    },
                    source,
                })?;
            pools.push(RecordedPool {
                kind,
                repetitions,
                base: paired.old,
                changed: paired.new,
            });
        }
    }
    Ok(pools)
}

/// Gaussian stand-in for recorded pools.
///
/// Each VM gets a level drawn from `N(mean, vm_sd)` (changed version:
/// `mean + gamma * vm_sd`); each iteration's per-repetition value is the
/// level plus `N(0, iteration_sd / sqrt(repetitions))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub gamma: f64,
    pub mean_ns: f64,
    pub vm_sd_ns: f64,
    pub iteration_sd_ns: f64,
}

impl SyntheticSpec {
    pub fn new(gamma: f64) -> Self {
        SyntheticSpec {
            gamma,
            mean_ns: 100.0,
            vm_sd_ns: 1.0,
            iteration_sd_ns: 1.0,
        }
    }

    fn validate(&self) -> Result<(), TunerError> {
        let ok = self.gamma.is_finite()
            && self.gamma >= 0.0
            && self.mean_ns.is_finite()
            && self.mean_ns > 0.0
            && self.vm_sd_ns.is_finite()
            && self.vm_sd_ns >= 0.0
            && self.iteration_sd_ns.is_finite()
            && self.iteration_sd_ns >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(plan_error(
                "synthetic",
                format!("invalid parameters {self:?}"),
            ))
        }
    }

    /// One synthetic series whose VM levels are centred on `mean_ns + shift_ns`.
    pub fn series(
        &self,
        config: MeasurementConfig,
        workload: WorkloadSpec,
        shift_ns: f64,
        seed: u64,
    ) -> MeasurementSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps = config.repetitions as f64;
        let level_dist = Normal::new(self.mean_ns + shift_ns, self.vm_sd_ns).expect("finite sd");
        let noise = Normal::new(0.0, self.iteration_sd_ns / reps.sqrt()).expect("finite sd");
        let total = config.total_iterations() as usize;
        let vm_runs = (0..config.vms)
            .map(|vm_index| {
                let level = level_dist.sample(&mut rng);
                let mut stream: Vec<u64> = (0..total)
                    .map(|_| (reps * (level + noise.sample(&mut rng))).round().max(0.0) as u64)
                    .collect();
                let measurement_ns = stream.split_off(config.warmup_iterations as usize);
                VmRun {
                    vm_index,
                    warmup_ns: stream,
                    measurement_ns,
                }
            })
            .collect();
        let mut environment = BTreeMap::new();
        environment.insert("source".into(), "synthetic".into());
        MeasurementSeries {
            config,
            workload,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
            environment,
            vm_runs,
        }
    }

    /// Pools for every workload and repetitions value of the plan.
    pub fn pools(&self, plan: &TunerPlan) -> Result<Vec<RecordedPool>, TunerError> {
        plan.validate()?;
        self.validate()?;
        let mut pools = Vec::new();
        for (k, &kind) in plan.workloads.iter().enumerate() {
            for &repetitions in &plan.repetitions_grid {
                let config = plan.pool_config(repetitions);
                let seed = |variant: u64| mix(plan.seed, &[0x5EED, k as u64, repetitions, variant]);
                pools.push(RecordedPool {
                    kind,
                    repetitions,
                    base: self.series(config, plan.base_workload(kind), 0.0, seed(0)),
                    changed: self.series(
                        config,
                        plan.changed_workload(kind),
                        self.gamma * self.vm_sd_ns,
                        seed(1),
                    ),
                });
            }
        }
        Ok(pools)
    }
}

impl FromStr for SyntheticSpec {
    type Err = String;

    /// `gamma=G[,mean=M][,vm_sd=S][,iteration_sd=T]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = SyntheticSpec::new(f64::NAN);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let value: f64 = value.trim().parse().map_err(|e| format!("{key}: {e}"))?;
            match key.trim() {
                "gamma" => spec.gamma = value,
                "mean" => spec.mean_ns = value,
                "vm_sd" => spec.vm_sd_ns = value,
                "iteration_sd" => spec.iteration_sd_ns = value,
                other => return Err(format!("unknown synthetic parameter `{other}`")),
            }
        }
        if spec.gamma.is_nan() {
            return Err("gamma is required".into());
        }
        Ok(spec)
    }
}

/// Per-VM prefix sums of one recorded series.
#[derive(Debug, Clone)]
pub struct VersionPool {
    repetitions: u64,
    prefix: Vec<Vec<u128>>,
}

impl VersionPool {
    pub fn from_series(series: &MeasurementSeries) -> Self {
        let prefix = series
            .vm_runs
            .iter()
            .map(|run| {
                let mut acc = 0u128;
                std::iter::once(0)
                    .chain(run.stream().map(|ns| {
                        acc += ns as u128;
                        acc
                    }))
                    .collect()
            })
            .collect();
        VersionPool {
            repetitions: series.config.repetitions,
            prefix,
        }
    }

    pub fn vms(&self) -> usize {
        self.prefix.len()
    }

    /// Recorded iterations per VM.
    pub fn depth(&self) -> usize {
        self.prefix.iter().map(|p| p.len() - 1).min().unwrap_or(0)
    }

    /// Mean per-repetition duration of recorded iterations `i+1..=2i`.
    pub fn vm_mean(&self, vm: usize, iterations: usize) -> f64 {
        let p = &self.prefix[vm];
        (p[2 * iterations] - p[iterations]) as f64 / (iterations as f64 * self.repetitions as f64)
    }

    fn check(&self, vms: usize, iterations: usize) -> Result<(), TunerError> {
        if vms > self.vms() {
            return Err(TunerError::TooFewVms {
                needed: vms,
                available: self.vms(),
            });
        }
        if 2 * iterations > self.depth() {
            return Err(TunerError::TooShallow {
                needed: 2 * iterations,
                available: self.depth(),
            });
        }
        Ok(())
    }
}

/// Decides whether two per-VM mean samples differ.
pub trait ChangeDetector: Sync {
    fn detect(&self, old: &[f64], new: &[f64]) -> Result<bool, StatsError>;
}

impl ChangeDetector for DecisionConfig {
    fn detect(&self, old: &[f64], new: &[f64]) -> Result<bool, StatsError> {
        Ok(decide(old, new, self)?.changed)
    }
}

impl<F> ChangeDetector for F
where
    F: Fn(&[f64], &[f64]) -> bool + Sync,
{
    fn detect(&self, old: &[f64], new: &[f64]) -> Result<bool, StatsError> {
        Ok(self(old, new))
    }
}

/// Outcome counters and F1 for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub vms: u32,
    pub iterations: u32,
    pub repetitions: u64,
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub true_negatives: u64,
}

impl GridCell {
    pub fn from_counts(
        vms: u32,
        iterations: u32,
        repetitions: u64,
        tp: u64,
        fp: u64,
        fn_: u64,
        tn: u64,
    ) -> Self {
        GridCell {
            vms,
            iterations,
            repetitions,
            f1: f1_score(tp, fp, fn_),
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
        }
    }

    pub fn key(&self) -> (u32, u32, u64) {
        (self.vms, self.iterations, self.repetitions)
    }

    /// `iterations * repetitions`, the per-VM cost after the VM count.
    pub fn cost(&self) -> u128 {
        self.iterations as u128 * self.repetitions as u128
    }

    /// Equal warmup and measurement iterations.
    pub fn config(&self) -> MeasurementConfig {
        MeasurementConfig {
            vms: self.vms,
            warmup_iterations: self.iterations,
            measurement_iterations: self.iterations,
            repetitions: self.repetitions,
            ..MeasurementConfig::default()
        }
    }
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing was detected or missed.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denominator = 2 * tp + fp + fn_;
    if denominator == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denominator as f64
    }
}

/// Cells ordered by `(vms, iterations, repetitions)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Grid {
    pub resamples: u64,
    cells: Vec<GridCell>,
}

impl F1Grid {
    pub fn new(resamples: u64, mut cells: Vec<GridCell>) -> Self {
        cells.sort_by_key(GridCell::key);
        cells.dedup_by_key(|c| c.key());
        F1Grid { resamples, cells }
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, vms: u32, iterations: u32, repetitions: u64) -> Option<&GridCell> {
        self.cells
            .binary_search_by_key(&(vms, iterations, repetitions), GridCell::key)
            .ok()
            .map(|i| &self.cells[i])
    }

    /// Heatmap CSV, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("vms,iterations,repetitions,f1,tp,fp,fn,tn\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.vms,
                c.iterations,
                c.repetitions,
                c.f1,
                c.true_positives,
                c.false_positives,
                c.false_negatives,
                c.true_negatives
            );
        }
        s
    }

    /// Cell-wise mean F1 with summed counters.
    pub fn average(grids: &[F1Grid]) -> F1Grid {
        let mut acc: BTreeMap<(u32, u32, u64), (GridCell, usize)> = BTreeMap::new();
        for grid in grids {
            for c in &grid.cells {
                acc.entry(c.key())
                    .and_modify(|(sum, n)| {
                        sum.f1 += c.f1;
                        sum.true_positives += c.true_positives;
                        sum.false_positives += c.false_positives;
                        sum.false_negatives += c.false_negatives;
                        sum.true_negatives += c.true_negatives;
                        *n += 1;
                    })
                    .or_insert((*c, 1));
            }
        }
        let cells = acc
            .into_values()
            .map(|(mut c, n)| {
                c.f1 /= n as f64;
                c
            })
            .collect();
        F1Grid::new(grids.iter().map(|g| g.resamples).sum(), cells)
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    fn finalize(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(finalize(seed), |h, &p| {
        finalize(h.wrapping_add(0x9E37_79B9_7F4A_7C15) ^ p)
    })
}

/// Seed of one resampling round.
pub fn round_seed(seed: u64, vms: u32, iterations: u32, repetitions: u64, round: u32) -> u64 {
    mix(
        seed,
        &[vms as u64, iterations as u64, repetitions, round as u64],
    )
}

/// Resampled detection counts for one configuration.
pub fn estimate_f1(
    base: &VersionPool,
    changed: &VersionPool,
    vms: u32,
    iterations: u32,
    detector: &dyn ChangeDetector,
    resamples: u32,
    seed: u64,
) -> Result<GridCell, TunerError> {
    let (v, i) = (vms as usize, iterations as usize);
    if v < 2 {
        return Err(plan_error("vms", "must be >= 2"));
    }
    if i == 0 {
        return Err(plan_error("iterations", "must be >= 1"));
    }
    base.check(v, i)?;
    changed.check(v, i)?;
    let repetitions = base.repetitions;
    let disjoint = base.vms() >= 2 * v;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut a = Vec::with_capacity(v);
    let mut b = Vec::with_capacity(v);
    for round in 0..resamples {
        let mut rng =
            ChaCha8Rng::seed_from_u64(round_seed(seed, vms, iterations, repetitions, round));

        a.clear();
        b.clear();
        a.extend(
            sample(&mut rng, base.vms(), v)
                .iter()
                .map(|vm| base.vm_mean(vm, i)),
        );
        b.extend(
            sample(&mut rng, changed.vms(), v)
                .iter()
                .map(|vm| changed.vm_mean(vm, i)),
        );
        if detector.detect(&a, &b)? {
            tp += 1;
        }

        a.clear();
        b.clear();
        if disjoint {
            let drawn = sample(&mut rng, base.vms(), 2 * v).into_vec();
            a.extend(drawn[..v].iter().map(|&vm| base.vm_mean(vm, i)));
            b.extend(drawn[v..].iter().map(|&vm| base.vm_mean(vm, i)));
        } else {
            a.extend(
                sample(&mut rng, base.vms(), v)
                    .iter()
                    .map(|vm| base.vm_mean(vm, i)),
            );
            b.extend(
                sample(&mut rng, base.vms(), v)
                    .iter()
                    .map(|vm| base.vm_mean(vm, i)),
            );
        }
        if detector.detect(&a, &b)? {
            fp += 1;
        }
    }
    let r = resamples as u64;
    Ok(GridCell::from_counts(
        vms,
        iterations,
        repetitions,
        tp,
        fp,
        r - tp,
        r - fp,
    ))
}

/// Outcome of the selection rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Selected {
        cell: GridCell,
        config: MeasurementConfig,
    },
    /// No cell qualified; `best` is the highest-F1 cell for diagnostics.
    NoFeasible { best: Option<GridCell> },
}

impl Selection {
    pub fn config(&self) -> Option<MeasurementConfig> {
        match self {
            Selection::Selected { config, .. } => Some(*config),
            Selection::NoFeasible { .. } => None,
        }
    }
}

/// Whether no cell with the same VMs and repetitions but more iterations
/// loses more than the tolerance.
fn is_monotone(grid: &F1Grid, cell: &GridCell) -> bool {
    grid.cells.iter().all(|other| {
        other.vms != cell.vms
            || other.repetitions != cell.repetitions
            || other.iterations <= cell.iterations
            || other.f1 >= cell.f1 - MONOTONICITY_TOLERANCE
    })
}

/// Cheapest qualifying cell: fewest VMs, then the smallest
/// `iterations * repetitions`, then the larger repetitions.
pub fn select_configuration(grid: &F1Grid) -> Selection {
    let order = |c: &GridCell| (c.vms, c.cost(), std::cmp::Reverse(c.repetitions));
    let selected = grid
        .cells
        .iter()
        .filter(|c| c.f1 >= F1_THRESHOLD && is_monotone(grid, c))
        .min_by_key(|c| order(c));
    match selected {
        Some(cell) => Selection::Selected {
            cell: *cell,
            config: cell.config(),
        },
        None => Selection::NoFeasible {
            best: grid
                .cells
                .iter()
                .min_by(|x, y| y.f1.total_cmp(&x.f1).then_with(|| order(x).cmp(&order(y))))
                .copied(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadGrid {
    pub workload: WorkloadKind,
    pub grid: F1Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerReport {
    pub plan: TunerPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub workloads: Vec<WorkloadGrid>,
    /// Average over `workloads`; the selection is made on this grid.
    pub grid: F1Grid,
    pub selection: Selection,
}

/// Evaluates the full grid for every workload and selects on the average.
pub fn tune(plan: &TunerPlan, pools: &[RecordedPool]) -> Result<TunerReport, TunerError> {
    plan.validate()?;
    let cells = plan.sorted_grid();
    let mut workloads = Vec::with_capacity(plan.workloads.len());
    for &kind in &plan.workloads {
        let mut versions = BTreeMap::new();
        for &repetitions in &plan.repetitions_grid {
            let pool = pools
                .iter()
                .find(|p| p.kind == kind && p.repetitions == repetitions)
                .ok_or(TunerError::MissingPool { kind, repetitions })?;
            versions.insert(
                repetitions,
                (
                    VersionPool::from_series(&pool.base),
                    VersionPool::from_series(&pool.changed),
                ),
            );
        }
        let evaluated: Result<Vec<GridCell>, TunerError> = cells
            .par_iter()
            .map(|&(v, i, r)| {
                let (base, changed) = &versions[&r];
                estimate_f1(
                    base,
                    changed,
                    v,
                    i,
                    &plan.decision,
                    plan.resamples,
                    plan.seed,
                )
            })
            .collect();
        workloads.push(WorkloadGrid {
            workload: kind,
            grid: F1Grid::new(plan.resamples as u64, evaluated?),
        });
    }
    let grid = if workloads.len() == 1 {
        workloads[0].grid.clone()
    } else {
        F1Grid::average(&workloads.iter().map(|w| w.grid.clone()).collect::<Vec<_>>())
    };
    let selection = select_configuration(&grid);
    Ok(TunerReport {
        plan: plan.clone(),
        synthetic: None,
        workloads,
        grid,
        selection,
    })
}

/// Writes `report.json`, `heatmap.csv`, one `heatmap-<kind>.csv` per
/// workload and `timing.json` into `dir`. Returns the written paths.
pub fn write_report(
    report: &TunerReport,
    wall_seconds: f64,
    dir: &Path,
) -> crate::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    files.push((dir.join("report.json"), json));
    files.push((dir.join("heatmap.csv"), report.grid.to_csv()));
    for w in &report.workloads {
        files.push((
            dir.join(format!("heatmap-{}.csv", w.workload)),
            w.grid.to_csv(),
        ));
    }
    files.push((
        dir.join("timing.json"),
        format!("{}\n", serde_json::json!({ "wall_seconds": wall_seconds })),
    ));
    for (path, content) in &files {
        std::fs::write(path, content).map_err(|e| crate::Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TestKind;

    fn cell(vms: u32, iterations: u32, repetitions: u64, f1: f64) -> GridCell {
        GridCell {
            vms,
            iterations,
            repetitions,
            f1,
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
            true_negatives: 0,
        }
    }

    fn small_plan(gamma_resamples: u32) -> TunerPlan {
        let mut plan = TunerPlan::new(WorkloadKind::Add, 300, vec![5, 10], vec![2, 4], vec![100]);
        plan.resamples = gamma_resamples;
        plan.seed = 7;
        plan
    }

    #[test]
    fn f1_arithmetic() {
        assert_eq!(f1_score(99, 1, 1), 0.99);
        assert_eq!(f1_score(0, 0, 0), 0.0);
        assert_eq!(f1_score(100, 100, 0), 2.0 / 3.0);
    }

    #[test]
    fn degenerate_detectors() {
        let plan = small_plan(200);
        let pools = SyntheticSpec::new(1.0).pools(&plan).unwrap();
        let base = VersionPool::from_series(&pools[0].base);
        let changed = VersionPool::from_series(&pools[0].changed);
        let always = |_: &[f64], _: &[f64]| true;
        let c = estimate_f1(&base, &changed, 5, 2, &always, 200, 1).unwrap();
        assert_eq!((c.true_positives, c.false_positives), (200, 200));
        assert_eq!(c.f1, 2.0 / 3.0);
        let never = |_: &[f64], _: &[f64]| false;
        let c = estimate_f1(&base, &changed, 5, 2, &never, 200, 1).unwrap();
        assert_eq!(c.f1, 0.0);
        assert_eq!(c.true_negatives, 200);
    }

    #[test]
    fn pool_bounds_checked() {
        let plan = small_plan(10);
        let pools = SyntheticSpec::new(1.0).pools(&plan).unwrap();
        let base = VersionPool::from_series(&pools[0].base);
        assert_eq!(base.vms(), 20);
        assert_eq!(base.depth(), 8);
        let d = DecisionConfig::default();
        assert!(matches!(
            estimate_f1(&base, &base, 21, 2, &d, 10, 0),
            Err(TunerError::TooFewVms { .. })
        ));
        assert!(matches!(
            estimate_f1(&base, &base, 5, 5, &d, 10, 0),
            Err(TunerError::TooShallow { .. })
        ));
    }

    #[test]
    fn vm_mean_uses_second_half() {
        let config = MeasurementConfig::equal_warmup(1, 2, 10);
        let series = MeasurementSeries {
            config,
            workload: WorkloadSpec::new(WorkloadKind::Add, 1),
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
            environment: BTreeMap::new(),
            vm_runs: vec![VmRun {
                vm_index: 0,
                warmup_ns: vec![1000, 2000],
                measurement_ns: vec![30, 50],
            }],
        };
        let pool = VersionPool::from_series(&series);
        assert_eq!(pool.vm_mean(0, 1), 200.0);
        assert_eq!(pool.vm_mean(0, 2), 4.0);
    }

    #[test]
    fn selection_threshold_and_order() {
        let grid = F1Grid::new(
            100,
            vec![
                cell(30, 49, 100_000, 0.995),
                cell(30, 49, 10_000, 0.995),
                cell(20, 49, 100_000, 0.98),
                cell(40, 10, 1_000, 1.0),
            ],
        );
        match select_configuration(&grid) {
            Selection::Selected { cell, config } => {
                assert_eq!(cell.key(), (30, 49, 10_000));
                assert_eq!(config.warmup_iterations, 49);
                assert_eq!(config.measurement_iterations, 49);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn selection_tie_prefers_more_repetitions() {
        let grid = F1Grid::new(
            100,
            vec![cell(30, 490, 10_000, 0.995), cell(30, 49, 100_000, 0.995)],
        );
        let sel = select_configuration(&grid);
        assert_eq!(sel.config().unwrap().repetitions, 100_000);
    }

    #[test]
    fn selection_monotonicity_and_infeasible() {
        let grid = F1Grid::new(
            100,
            vec![
                cell(10, 10, 100, 0.995),
                cell(10, 20, 100, 0.98),
                cell(20, 10, 100, 0.991),
            ],
        );
        assert_eq!(select_configuration(&grid).config().unwrap().vms, 20);
        let grid = F1Grid::new(100, vec![cell(10, 10, 100, 0.5), cell(20, 10, 100, 0.9)]);
        match select_configuration(&grid) {
            Selection::NoFeasible { best } => assert_eq!(best.unwrap().vms, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tune_is_deterministic_and_conserves_counts() {
        let mut plan = small_plan(300);
        plan.decision = DecisionConfig::new(TestKind::WelchTTest, 0.01);
        let pools = SyntheticSpec::new(3.0).pools(&plan).unwrap();
        let a = tune(&plan, &pools).unwrap();
        let b = tune(&plan, &pools).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.len(), 4);
        for c in a.grid.cells() {
            assert_eq!(c.true_positives + c.false_negatives, 300);
            assert_eq!(c.false_positives + c.true_negatives, 300);
        }
        assert_eq!(a.grid.to_csv().lines().count(), 5);
    }

    #[test]
    fn synthetic_spec_parses() {
        let s: SyntheticSpec = "gamma=3, vm_sd=2".parse().unwrap();
        assert_eq!((s.gamma, s.vm_sd_ns, s.mean_ns), (3.0, 2.0, 100.0));
        assert!("vm_sd=2".parse::<SyntheticSpec>().is_err());
        assert!("gamma=1,foo=2".parse::<SyntheticSpec>().is_err());
    }

    #[test]
    fn average_of_two_grids() {
        let g1 = F1Grid::new(10, vec![GridCell::from_counts(5, 1, 1, 10, 0, 0, 10)]);
        let g2 = F1Grid::new(10, vec![GridCell::from_counts(5, 1, 1, 0, 0, 10, 10)]);
        let avg = F1Grid::average(&[g1, g2]);
        let c = avg.get(5, 1, 1).unwrap();
        assert_eq!(c.f1, 0.5);
        assert_eq!(c.true_positives + c.false_negatives, 20);
    }
}
