//! Series summaries and change decisions between two versions.
//!
//! All tests operate on per-VM mean values, so the number of executor starts
//! is the sample size.

pub mod distributions;
pub mod mann_whitney;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecisionConfig, MeasurementSeries, OutlierPolicy, SeriesSummary, TestKind};

pub use distributions::{normal_cdf, normal_quantile, normal_sf, t_cdf, t_quantile, t_two_sided_p};
pub use mann_whitney::{mann_whitney, MannWhitney};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
}

/// Result of comparing two samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: TestKind,
    pub changed: bool,
    /// Welch t, Mann-Whitney min(U1, U2), or the CI separation ratio
    /// `|mean diff| / (half width old + half width new)`.
    pub statistic: f64,
    /// Absent for the confidence-interval comparison.
    pub p_value: Option<f64>,
    /// Signed effect size, positive when the new version is faster.
    pub effect_size: f64,
    pub n_old: usize,
    pub n_new: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with `n - 1` denominator, two-pass.
fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

fn require(n: usize, needed: usize) -> Result<(), StatsError> {
    if n < needed {
        Err(StatsError::TooFewValues { needed, got: n })
    } else {
        Ok(())
    }
}

/// Per-VM mean per-repetition durations and their aggregate.
///
/// Means and deviations are accumulated in integer nanoseconds and divided
/// last.
pub fn summarize(series: &MeasurementSeries) -> Result<SeriesSummary, StatsError> {
    let vms = series.vm_runs.len();
    require(vms, 2)?;
    let per_vm_count = series.config.measurement_iterations as u128;
    if per_vm_count == 0
        || series
            .vm_runs
            .iter()
            .any(|r| r.measurement_ns.len() as u128 != per_vm_count)
    {
        return Err(StatsError::Domain(
            "every VM needs the configured measurement iterations".into(),
        ));
    }
    let scale = per_vm_count as f64 * series.config.repetitions as f64;
    let sums: Vec<u128> = series
        .vm_runs
        .iter()
        .map(|r| r.measurement_ns.iter().map(|&d| d as u128).sum())
        .collect();
    let total: u128 = sums.iter().sum();
    let per_vm_means_ns: Vec<f64> = sums.iter().map(|&s| s as f64 / scale).collect();
    let mean_ns = total as f64 / (scale * vms as f64);
    // V * S_k - sum(S) is exact in i128 for any realistic campaign.
    let v = vms as i128;
    let sq: f64 = sums
        .iter()
        .map(|&s| {
            let d = (v * s as i128 - total as i128) as f64;
            d * d
        })
        .sum();
    let stddev_ns = (sq / (vms as f64 - 1.0)).sqrt() / (scale * vms as f64);
    let relative_stddev = if mean_ns > 0.0 {
        stddev_ns / mean_ns
    } else {
        0.0
    };
    Ok(SeriesSummary {
        per_vm_means_ns,
        mean_ns,
        stddev_ns,
        relative_stddev,
    })
}

/// Single-pass Z-score filter: drops values whose distance from the mean
/// exceeds `threshold` sample standard deviations. Order is preserved.
pub fn remove_outliers(values: &[f64], threshold: f64) -> Result<Vec<f64>, StatsError> {
    require(values.len(), 2)?;
    if !(threshold > 0.0) {
        return Err(StatsError::Domain(format!(
            "outlier threshold {threshold} must be > 0"
        )));
    }
    let m = mean(values);
    let sd = variance(values).sqrt();
    if sd == 0.0 {
        return Ok(values.to_vec());
    }
    Ok(values
        .iter()
        .copied()
        .filter(|v| ((v - m) / sd).abs() <= threshold)
        .collect())
}

fn pooled_effect(
    mean_old: f64,
    var_old: f64,
    n_old: usize,
    mean_new: f64,
    var_new: f64,
    n_new: usize,
) -> f64 {
    let (n1, n2) = (n_old as f64, n_new as f64);
    let pooled = (((n1 - 1.0) * var_old + (n2 - 1.0) * var_new) / (n1 + n2 - 2.0)).sqrt();
    let diff = mean_old - mean_new;
    if pooled == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / pooled
    }
}

/// `(mean_old - mean_new) / pooled sd` over per-VM means.
pub fn effect_size(old: &SeriesSummary, new: &SeriesSummary) -> Result<f64, StatsError> {
    let (n1, n2) = (old.per_vm_means_ns.len(), new.per_vm_means_ns.len());
    require(n1, 2)?;
    require(n2, 2)?;
    Ok(pooled_effect(
        old.mean_ns,
        old.stddev_ns * old.stddev_ns,
        n1,
        new.mean_ns,
        new.stddev_ns * new.stddev_ns,
        n2,
    ))
}

/// Effect size computed directly from two samples.
pub fn effect_size_of(old: &[f64], new: &[f64]) -> Result<f64, StatsError> {
    require(old.len(), 2)?;
    require(new.len(), 2)?;
    Ok(pooled_effect(
        mean(old),
        variance(old),
        old.len(),
        mean(new),
        variance(new),
        new.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<Welch, StatsError> {
    require(a.len(), 2)?;
    require(b.len(), 2)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / n1, variance(b) / n2);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(Welch {
            t,
            df: n1 + n2 - 2.0,
            p_value: p,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (n1 - 1.0) + vb * vb / (n2 - 1.0));
    Ok(Welch {
        t,
        df,
        p_value: if t == 0.0 { 1.0 } else { t_two_sided_p(t, df) },
    })
}

/// Student-t confidence interval `(low, high)` of the mean at level `1 - alpha`.
pub fn confidence_interval(values: &[f64], alpha: f64) -> Result<(f64, f64), StatsError> {
    require(values.len(), 2)?;
    let n = values.len() as f64;
    let q = t_quantile(1.0 - alpha / 2.0, n - 1.0)?;
    let half = q * (variance(values) / n).sqrt();
    let m = mean(values);
    Ok((m - half, m + half))
}

fn apply_outlier_policy(values: &[f64], policy: OutlierPolicy) -> Result<Vec<f64>, StatsError> {
    match policy {
        OutlierPolicy::None => Ok(values.to_vec()),
        OutlierPolicy::ZScore { threshold } => remove_outliers(values, threshold),
    }
}

/// Decides "performance change" vs "no change" between two per-VM mean
/// samples.
pub fn decide(
    old: &[f64],
    new: &[f64],
    decision: &DecisionConfig,
) -> Result<TestOutcome, StatsError> {
    if !(decision.alpha > 0.0 && decision.alpha < 1.0) {
        return Err(StatsError::Domain(format!(
            "alpha {} not in (0, 1)",
            decision.alpha
        )));
    }
    require(old.len(), 2)?;
    require(new.len(), 2)?;
    let old = apply_outlier_policy(old, decision.outlier_policy)?;
    let new = apply_outlier_policy(new, decision.outlier_policy)?;
    require(old.len(), 2)?;
    require(new.len(), 2)?;
    let effect_size = effect_size_of(&old, &new)?;

    let (changed, statistic, p_value) = match decision.test {
        TestKind::WelchTTest => {
            let w = welch_t_test(&old, &new)?;
            (w.p_value < decision.alpha, w.t, Some(w.p_value))
        }
        TestKind::MannWhitney => {
            let mw = mann_whitney(&old, &new);
            (mw.p_value < decision.alpha, mw.u, Some(mw.p_value))
        }
        TestKind::ConfidenceIntervalOverlap => {
            let (lo_a, hi_a) = confidence_interval(&old, decision.alpha)?;
            let (lo_b, hi_b) = confidence_interval(&new, decision.alpha)?;
            let disjoint = lo_a > hi_b || lo_b > hi_a;
            let gap = (mean(&old) - mean(&new)).abs();
            let width = (hi_a - lo_a) / 2.0 + (hi_b - lo_b) / 2.0;
            let ratio = if width > 0.0 {
                gap / width
            } else if gap > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            (disjoint, ratio, None)
        }
    };
    Ok(TestOutcome {
        test: decision.test,
        changed,
        statistic,
        p_value,
        effect_size,
        n_old: old.len(),
        n_new: new.len(),
    })
}
