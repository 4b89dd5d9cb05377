//! Analytic detectability model for two-sided tests.
//!
//! With effect size `gamma`, `vms` executor starts per version and
//! significance `alpha`, the Type II error is
//! `beta = 1 - Phi(gamma * sqrt(vms / 2) - z(1 - alpha / 2))`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::distributions::{normal_cdf, normal_quantile, normal_sf};

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("gamma = 0 cannot be detected with any finite number of VMs")]
    Unreachable,
}

fn check_alpha(alpha: f64) -> Result<(), PowerError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PowerError::Domain(format!("alpha = {alpha} not in (0, 1)")))
    }
}

fn z_two_sided(alpha: f64) -> f64 {
    // alpha is validated, so the quantile cannot fail
    normal_quantile(1.0 - alpha / 2.0).unwrap_or(f64::NAN)
}

/// Probability of missing a change of size `gamma` with `vms` starts per version.
pub fn type_ii_error(gamma: f64, vms: u64, alpha: f64) -> Result<f64, PowerError> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(PowerError::Domain(format!(
            "gamma = {gamma} must be finite and >= 0"
        )));
    }
    if vms < 1 {
        return Err(PowerError::Domain("vms must be >= 1".into()));
    }
    check_alpha(alpha)?;
    Ok(beta_unchecked(gamma, vms as f64, alpha))
}

fn beta_unchecked(gamma: f64, vms: f64, alpha: f64) -> f64 {
    let x = gamma * (vms / 2.0).sqrt() - z_two_sided(alpha);
    normal_sf(x).clamp(0.0, 1.0)
}

/// Smallest VM count whose Type II error is at most `beta`.
pub fn required_vms(gamma: f64, alpha: f64, beta: f64) -> Result<u64, PowerError> {
    if gamma == 0.0 {
        return Err(PowerError::Unreachable);
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(PowerError::Domain(format!(
            "gamma = {gamma} must be finite and > 0"
        )));
    }
    check_alpha(alpha)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(PowerError::Domain(format!("beta = {beta} not in (0, 1)")));
    }
    let z_beta = normal_quantile(1.0 - beta).map_err(|e| PowerError::Domain(e.to_string()))?;
    let closed = 2.0 * ((z_beta + z_two_sided(alpha)) / gamma).powi(2);
    if !closed.is_finite() || closed > u64::MAX as f64 / 4.0 {
        return Err(PowerError::Domain("required VM count overflows".into()));
    }
    let mut v = (closed.ceil() as u64).max(1);
    // Floating-point rounding of the closed form can be off by one either way.
    while v > 1 && beta_unchecked(gamma, (v - 1) as f64, alpha) <= beta {
        v -= 1;
    }
    while beta_unchecked(gamma, v as f64, alpha) > beta {
        v += 1;
    }
    Ok(v)
}

/// Whether the VMs needed for a change fit into a time budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub required_vms: u64,
    pub total_seconds: f64,
    pub budget_seconds: f64,
    /// VM starts per version that fit into the budget.
    pub affordable_vms: u64,
    pub feasible: bool,
}

/// Budget check for a campaign. With `parallel_pairs` both versions' starts
/// run simultaneously, halving the wall time.
pub fn feasibility(
    gamma: f64,
    alpha: f64,
    beta: f64,
    seconds_per_vm: f64,
    budget_seconds: f64,
    parallel_pairs: bool,
) -> Result<Feasibility, PowerError> {
    if !(seconds_per_vm > 0.0) || !(budget_seconds > 0.0) {
        return Err(PowerError::Domain("durations must be positive".into()));
    }
    let required = required_vms(gamma, alpha, beta)?;
    let throughput = if parallel_pairs { 2.0 } else { 1.0 };
    let per_vm = seconds_per_vm / throughput;
    let total_seconds = required as f64 * per_vm;
    Ok(Feasibility {
        required_vms: required,
        total_seconds,
        budget_seconds,
        affordable_vms: (budget_seconds / per_vm).floor() as u64,
        feasible: total_seconds <= budget_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub vms: u64,
    pub alpha: f64,
    pub beta: f64,
}

/// Type II error over a grid of effect sizes and VM counts.
pub fn power_curve(
    gammas: &[f64],
    vms: impl IntoIterator<Item = u64> + Clone,
    alpha: f64,
) -> Result<Vec<CurvePoint>, PowerError> {
    let mut out = Vec::new();
    for &gamma in gammas {
        for v in vms.clone() {
            out.push(CurvePoint {
                gamma,
                vms: v,
                alpha,
                beta: type_ii_error(gamma, v, alpha)?,
            });
        }
    }
    Ok(out)
}

/// CSV with header `gamma,vms,alpha,beta`.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("gamma,vms,alpha,beta\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.gamma, p.vms, p.alpha, p.beta);
    }
    s
}

/// Statistical power `1 - beta`; convenience for reports.
pub fn detection_probability(gamma: f64, vms: u64, alpha: f64) -> Result<f64, PowerError> {
    type_ii_error(gamma, vms, alpha)?;
    Ok(normal_cdf(
        gamma * (vms as f64 / 2.0).sqrt() - z_two_sided(alpha),
    ))
}
