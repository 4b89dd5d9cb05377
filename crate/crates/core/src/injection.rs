//! Artificial regressions: busy-wait injected into every primitive
//! operation (or a seeded subset), measured with paired campaigns.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::{clock::measure_resolution_ns, Harness};
use crate::model::{DecisionConfig, MeasurementConfig, MeasurementSeries, WorkloadSpec};
use crate::power::{type_ii_error, PowerError};
use crate::stats::{decide, summarize, TestOutcome};
use crate::workloads::busy_wait_quantum_ns;

/// Default delta grid in nanoseconds.
pub const DEFAULT_DELTAS_NS: [u64; 4] = [0, 5, 50, 500];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub workload: WorkloadSpec,
    pub delta_ns: u64,
    pub config: MeasurementConfig,
    pub decision: DecisionConfig,
    pub trials: u32,
    pub seed: u64,
    /// Fraction of operations that receive the delay.
    pub subset_fraction: f64,
    /// Run trials concurrently; campaigns then disturb each other.
    pub parallel_trials: bool,
}

impl StudyPlan {
    pub fn new(
        workload: WorkloadSpec,
        delta_ns: u64,
        config: MeasurementConfig,
        trials: u32,
    ) -> Self {
        StudyPlan {
            workload,
            delta_ns,
            config,
            decision: DecisionConfig::default(),
            trials,
            seed: 0,
            subset_fraction: 1.0,
            parallel_trials: false,
        }
    }

    fn validate(&self) -> Result<(), crate::Error> {
        if self.trials == 0 {
            return Err(crate::ModelError::invariant("trials", "must be >= 1").into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(
                crate::ModelError::invariant("subset_fraction", "must be in (0, 1]").into(),
            );
        }
        self.config.validate()?;
        self.workload.validate()?;
        self.decision.validate()?;
        Ok(())
    }

    /// Base and injected workloads of one trial; they differ only in the delay.
    pub fn trial_workloads(&self, trial: u32) -> (WorkloadSpec, WorkloadSpec) {
        let seed = self
            .seed
            .wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let base = WorkloadSpec {
            seed,
            delay_fraction: self.subset_fraction,
            ..self.workload.with_delay_ns(0)
        };
        (base, base.with_delay_ns(self.delta_ns))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u32,
    pub base: WorkloadSpec,
    pub injected: WorkloadSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TestOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_relative_stddev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub plan: StudyPlan,
    pub trials: u32,
    pub detections: u32,
    /// Trials aborted by harness or statistics errors.
    pub erroneous: u32,
    /// Detections over non-erroneous trials.
    pub detection_rate: f64,
    pub mean_effect_size: f64,
    /// Mean absolute effect size.
    pub mean_gamma: f64,
    pub mean_relative_stddev: f64,
    pub clock_resolution_ns: u64,
    pub busy_wait_quantum_ns: u64,
    pub outcomes: Vec<TrialOutcome>,
}

fn run_trial(harness: &Harness, plan: &StudyPlan, trial: u32) -> TrialOutcome {
    let (base, injected) = plan.trial_workloads(trial);
    let mut record = TrialOutcome {
        trial,
        base,
        injected,
        outcome: None,
        base_relative_stddev: None,
        error: None,
    };
    let result = harness
        .run_paired_campaign(&plan.config, &base, &injected)
        .map_err(|e| e.to_string())
        .and_then(|paired| {
            let old = summarize(&paired.old).map_err(|e| e.to_string())?;
            let new = summarize(&paired.new).map_err(|e| e.to_string())?;
            let outcome = decide(&old.per_vm_means_ns, &new.per_vm_means_ns, &plan.decision)
                .map_err(|e| e.to_string())?;
            Ok((outcome, old.relative_stddev))
        });
    match result {
        Ok((outcome, rel)) => {
            record.outcome = Some(outcome);
            record.base_relative_stddev = Some(rel);
        }
        Err(e) => {
            log::warn!("trial {trial} failed: {e}");
            record.error = Some(e);
        }
    }
    record
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs `plan.trials` paired campaigns of base vs base+delta.
pub fn run_injection_study(
    harness: &Harness,
    plan: &StudyPlan,
) -> Result<StudyReport, crate::Error> {
    plan.validate()?;
    harness.memory_budget.check(&plan.workload, &plan.config)?;
    let outcomes: Vec<TrialOutcome> = if plan.parallel_trials {
        (0..plan.trials)
            .into_par_iter()
            .map(|t| run_trial(harness, plan, t))
            .collect()
    } else {
        (0..plan.trials)
            .map(|t| run_trial(harness, plan, t))
            .collect()
    };
    Ok(aggregate(*plan, outcomes))
}

/// Study report over already-run trials.
pub fn aggregate(plan: StudyPlan, outcomes: Vec<TrialOutcome>) -> StudyReport {
    let ok: Vec<&TestOutcome> = outcomes.iter().filter_map(|o| o.outcome.as_ref()).collect();
    let detections = ok.iter().filter(|o| o.changed).count() as u32;
    let erroneous = outcomes.len() as u32 - ok.len() as u32;
    let finite = || ok.iter().map(|o| o.effect_size).filter(|e| e.is_finite());
    StudyReport {
        plan,
        trials: outcomes.len() as u32,
        detections,
        erroneous,
        detection_rate: if ok.is_empty() {
            0.0
        } else {
            detections as f64 / ok.len() as f64
        },
        mean_effect_size: mean(finite()),
        mean_gamma: mean(finite().map(f64::abs)),
        mean_relative_stddev: mean(outcomes.iter().filter_map(|o| o.base_relative_stddev)),
        clock_resolution_ns: measure_resolution_ns(),
        busy_wait_quantum_ns: busy_wait_quantum_ns(1000),
        outcomes,
    }
}

/// CSV `delta_ns,trials,detections,rate,mean_gamma`, one row per report.
pub fn summary_csv(reports: &[StudyReport]) -> String {
    let mut s = String::from("delta_ns,trials,detections,rate,mean_gamma\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.plan.delta_ns, r.trials, r.detections, r.detection_rate, r.mean_gamma
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Standard deviation of the per-VM mean duration of one execution.
    pub sigma_ns: f64,
    pub slowdown_ns: f64,
    pub gamma: f64,
    pub beta: f64,
}

/// Analytic Type II error of a planned injection, from a base series:
/// `gamma = size * delta * fraction / sigma`.
pub fn predict_detectability(
    base: &MeasurementSeries,
    delta_ns: u64,
    subset_fraction: f64,
    config: &MeasurementConfig,
    alpha: f64,
) -> Result<Prediction, crate::Error> {
    let summary = summarize(base)?;
    let slowdown_ns = base.workload.size as f64 * delta_ns as f64 * subset_fraction;
    let sigma_ns = summary.stddev_ns;
    let gamma = if slowdown_ns == 0.0 {
        0.0
    } else if sigma_ns > 0.0 {
        slowdown_ns / sigma_ns
    } else {
        f64::INFINITY
    };
    let beta = if gamma.is_infinite() {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PowerError::Domain(format!("alpha = {alpha} not in (0, 1)")).into());
        }
        0.0
    } else {
        type_ii_error(gamma, config.vms as u64, alpha)?
    };
    Ok(Prediction {
        sigma_ns,
        slowdown_ns,
        gamma,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{VmRun, WorkloadKind};
    use std::collections::BTreeMap;

    fn series(per_vm_ns: &[u64]) -> MeasurementSeries {
        let config = MeasurementConfig::equal_warmup(per_vm_ns.len() as u32, 1, 10);
        MeasurementSeries {
            config,
            workload: WorkloadSpec::new(WorkloadKind::Add, 300),
            timestamp: chrono::DateTime::<chrono::Utc>::UNIX_EPOCH,
            environment: BTreeMap::new(),
            vm_runs: per_vm_ns
                .iter()
                .enumerate()
                .map(|(i, &ns)| VmRun {
                    vm_index: i as u32,
                    warmup_ns: vec![ns],
                    measurement_ns: vec![ns],
                })
                .collect(),
        }
    }

    #[test]
    fn zero_delta_predicts_one_minus_half_alpha() {
        let s = series(&[1000, 1100, 900, 1050]);
        let p = predict_detectability(&s, 0, 1.0, &s.config, 0.01).unwrap();
        assert_eq!(p.gamma, 0.0);
        assert!((p.beta - 0.995).abs() < 1e-12);
    }

    #[test]
    fn doubling_sigma_halves_gamma() {
        let narrow = series(&[1000, 1100, 900, 1050]);
        let wide = series(&[1000, 1200, 800, 1100]);
        let a = predict_detectability(&narrow, 1, 1.0, &narrow.config, 0.01).unwrap();
        let b = predict_detectability(&wide, 1, 1.0, &wide.config, 0.01).unwrap();
        assert!((b.sigma_ns - 2.0 * a.sigma_ns).abs() < 1e-9);
        assert!((b.gamma - a.gamma / 2.0).abs() < 1e-9);
        assert!(b.beta > a.beta);
    }

    #[test]
    fn trial_workloads_differ_only_in_delay() {
        let plan = StudyPlan::new(
            WorkloadSpec::new(WorkloadKind::Add, 300),
            5,
            MeasurementConfig::equal_warmup(2, 1, 1),
            3,
        );
        let (base, injected) = plan.trial_workloads(2);
        assert_eq!(base.with_delay_ns(5), injected);
        assert_ne!(plan.trial_workloads(1).0.seed, base.seed);
    }

    #[test]
    fn aggregate_skips_erroneous() {
        let plan = StudyPlan::new(
            WorkloadSpec::new(WorkloadKind::Add, 1),
            5,
            MeasurementConfig::equal_warmup(2, 1, 1),
            3,
        );
        let (base, injected) = plan.trial_workloads(0);
        let outcome = TestOutcome {
            test: crate::TestKind::MannWhitney,
            changed: true,
            statistic: 0.0,
            p_value: Some(0.001),
            effect_size: -2.0,
            n_old: 2,
            n_new: 2,
        };
        let ok = TrialOutcome {
            trial: 0,
            base,
            injected,
            outcome: Some(outcome),
            base_relative_stddev: Some(0.01),
            error: None,
        };
        let bad = TrialOutcome {
            outcome: None,
            base_relative_stddev: None,
            error: Some("boom".into()),
            ..ok.clone()
        };
        let r = aggregate(plan, vec![ok, bad]);
        assert_eq!((r.trials, r.detections, r.erroneous), (2, 1, 1));
        assert_eq!(r.detection_rate, 1.0);
        assert_eq!(r.mean_gamma, 2.0);
        assert_eq!(summary_csv(&[r]).lines().nth(1).unwrap(), "5,2,1,1,2");
    }
}
