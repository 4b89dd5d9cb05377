//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use num::{BigInt, BigRational, ToPrimitive, Zero};
use perfdelta::{MeasurementConfig, MeasurementSeries, VmRun, WorkloadKind, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided Mann-Whitney p-value by enumerating every assignment of the
/// pooled ranks to the first sample. Tie-free input only.
pub fn brute_force_mw_p(a: &[f64], b: &[f64]) -> f64 {
    let n1 = a.len();
    let n = n1 + b.len();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let rank_of = |x: f64| pooled.iter().position(|&y| y == x).unwrap() + 1;
    let observed: usize = a.iter().map(|&x| rank_of(x)).sum::<usize>() - n1 * (n1 + 1) / 2;

    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        let u = rank_sum - n1 * (n1 + 1) / 2;
        total += 1;
        if u <= observed {
            le += 1;
        }
        if u >= observed {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Lanczos approximation (g = 7, 9 terms) of ln Gamma for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Continued fraction of the incomplete beta function, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Welch two-sided p-value, `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn welch_oracle(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, var / n)
    };
    let (n1, m1, s1) = stats(a);
    let (n2, m2, s2) = stats(b);
    let t = (m1 - m2) / (s1 + s2).sqrt();
    let df = (s1 + s2).powi(2) / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Mean, standard deviation and relative standard deviation of the per-VM
/// mean per-repetition durations, computed in exact rational arithmetic.
pub fn rational_summary(series: &MeasurementSeries) -> (f64, f64, f64) {
    let reps = BigInt::from(series.config.repetitions);
    let means: Vec<BigRational> = series
        .vm_runs
        .iter()
        .map(|r| {
            let sum: BigInt = r.measurement_ns.iter().map(|&d| BigInt::from(d)).sum();
            BigRational::new(sum, BigInt::from(r.measurement_ns.len()) * &reps)
        })
        .collect();
    let v = BigRational::from_integer(BigInt::from(means.len()));
    let mean = means.iter().fold(BigRational::zero(), |acc, m| acc + m) / &v;
    let ss = means.iter().fold(BigRational::zero(), |acc, m| {
        acc + (m - &mean) * (m - &mean)
    });
    let variance = ss / (v - BigRational::from_integer(BigInt::from(1)));
    let mean_f = mean.to_f64().unwrap();
    let sd = variance.to_f64().unwrap().sqrt();
    let rel = if mean_f > 0.0 { sd / mean_f } else { 0.0 };
    (mean_f, sd, rel)
}

/// Relative closeness with an absolute floor for values near zero.
pub fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1e-300) || (got - want).abs() <= f64::MIN_POSITIVE
}

/// Random series with arbitrary shape and durations.
pub fn random_series(rng: &mut ChaCha8Rng, max_ns: u64) -> MeasurementSeries {
    let vms = rng.random_range(2..12);
    let iters = rng.random_range(1..8);
    let reps = rng.random_range(1..100_000);
    let config = MeasurementConfig::equal_warmup(vms, iters, reps);
    let vm_runs = (0..vms)
        .map(|vm_index| VmRun {
            vm_index,
            warmup_ns: (0..iters).map(|_| rng.random_range(0..=max_ns)).collect(),
            measurement_ns: (0..iters).map(|_| rng.random_range(0..=max_ns)).collect(),
        })
        .collect();
    MeasurementSeries {
        config,
        workload: WorkloadSpec::new(WorkloadKind::Add, 300),
        timestamp: chrono::DateTime::<chrono::Utc>::UNIX_EPOCH,
        environment: Default::default(),
        vm_runs,
    }
}

/// A tie-free pair with sizes `n1 + n2 <= max_total`, each at least `min_size`.
pub fn tie_free_pair(
    rng: &mut ChaCha8Rng,
    min_size: usize,
    max_total: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n1 = rng.random_range(min_size..=max_total - min_size);
    let n2 = rng.random_range(min_size..=max_total - n1);
    let shift: f64 = rng.random_range(0.0..3.0);
    loop {
        let a: Vec<f64> = (0..n1).map(|_| rng.random::<f64>() * 4.0).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.random::<f64>() * 4.0 + shift).collect();
        let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
        all.sort_by(f64::total_cmp);
        if all.windows(2).all(|w| w[0] != w[1]) {
            return (a, b);
        }
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
