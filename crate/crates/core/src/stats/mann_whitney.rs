//! Two-sided Mann-Whitney U test.
//!
//! Small tie-free samples get an exact p-value from the null distribution of
//! the rank sum; everything else uses a normal approximation with midrank
//! ties, the tie-corrected variance, a continuity correction and a fourth
//! cumulant (Edgeworth) correction.

use super::distributions::{normal_cdf, normal_pdf};

/// Largest `n_old + n_new` for which the exact distribution is enumerated.
pub const EXACT_MAX_TOTAL: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U of the first sample: pairs `(x, y)` with `x > y`, ties counting one half.
    pub u_first: f64,
    /// `min(U_first, U_second)`; invariant under swapping the samples.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of `a ++ b`, returned split back into the two samples.
fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, bool) {
    let mut all: Vec<(f64, usize)> = a.iter().chain(b).copied().zip(0..).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0.0; all.len()];
    let mut ties = false;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        if j - i > 1 {
            ties = true;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for item in &all[i..j] {
            ranks[item.1] = rank;
        }
        i = j;
    }
    let rb = ranks.split_off(a.len());
    (ranks, rb, ties)
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> MannWhitney {
    let (n1, n2) = (a.len(), b.len());
    let (ra, rb, ties) = midranks(a, b);
    let rank_sum: f64 = ra.iter().sum();
    let u_first = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_second = (n1 * n2) as f64 - u_first;
    let u = u_first.min(u_second);

    if !ties && n1 + n2 <= EXACT_MAX_TOTAL {
        let p_value = exact_p_value(n1, n2, u_first.round() as usize);
        return MannWhitney {
            u_first,
            u,
            p_value,
            exact: true,
        };
    }
    let mut all_ranks = ra;
    all_ranks.extend(rb);
    MannWhitney {
        u_first,
        u,
        p_value: approx_p_value(&all_ranks, n1, u_first),
        exact: false,
    }
}

/// Two-sided p-value from the normal approximation, regardless of sample
/// size or ties.
pub fn approximate_p_value(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb, _) = midranks(a, b);
    let u_first = ra.iter().sum::<f64>() - (a.len() * (a.len() + 1)) as f64 / 2.0;
    let mut all_ranks = ra;
    all_ranks.extend(rb);
    approx_p_value(&all_ranks, a.len(), u_first)
}

/// Number of ways each U value arises, indexed by U, for sample sizes
/// `(n1, n2)` without ties.
pub fn u_frequencies(n1: usize, n2: usize) -> Vec<u64> {
    // counts[k][s]: subsets of size k of the ranks seen so far with
    // U-contribution s (rank sum minus k(k+1)/2).
    let max_u = n1 * n2;
    let mut counts = vec![vec![0u64; max_u + 1]; n1 + 1];
    counts[0][0] = 1;
    for item in 0..n1 + n2 {
        // Taking rank `item + 1` as the k-th smallest chosen element adds
        // `item + 1 - k` to U.
        for k in (1..=n1.min(item + 1)).rev() {
            let add = item + 1 - k;
            if add > n2 {
                continue;
            }
            for s in (add..=max_u).rev() {
                counts[k][s] += counts[k - 1][s - add];
            }
        }
    }
    counts.swap_remove(n1)
}

/// Exact two-sided p-value `min(1, 2 min(P(U <= u), P(U >= u)))`.
pub fn exact_p_value(n1: usize, n2: usize, u: usize) -> f64 {
    let freq = u_frequencies(n1, n2);
    let total: u64 = freq.iter().sum();
    let u = u.min(n1 * n2);
    let lower: u64 = freq[..=u].iter().sum();
    let upper: u64 = freq[u..].iter().sum();
    let tail = lower.min(upper);
    (2.0 * tail as f64 / total as f64).min(1.0)
}

fn approx_p_value(ranks: &[f64], n1: usize, u_first: f64) -> f64 {
    let n = ranks.len() as f64;
    let n1f = n1 as f64;
    let n2f = n - n1f;
    let mean_rank = (n + 1.0) / 2.0;
    let (mut m2, mut m4) = (0.0, 0.0);
    for r in ranks {
        let d = r - mean_rank;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    // Cumulants of a sum of n1 draws without replacement from the midranks.
    let t = n1f * n2f;
    let variance = t / (n - 1.0) * m2;
    if !(variance > 0.0) {
        return 1.0;
    }
    let sd = variance.sqrt();
    let excess_kurtosis = if n > 3.0 {
        let k4 = t / ((n - 1.0) * (n - 2.0) * (n - 3.0))
            * ((n * (n + 1.0) - 6.0 * t) * m4
                + (-3.0 * n * (n - 1.0) * (n - 1.0) + 6.0 * t * (2.0 * n - 3.0)) / (n - 1.0)
                    * m2
                    * m2);
        k4 / (variance * variance)
    } else {
        0.0
    };

    let deviation = (u_first - n1f * n2f / 2.0).abs();
    let x = -((deviation - 0.5).max(0.0)) / sd;
    let tail = normal_cdf(x);
    let correction = normal_pdf(x) * excess_kurtosis / 24.0 * (x * x * x - 3.0 * x);
    // Multiplicative form keeps far tails positive.
    let lower = tail * (-correction / tail).exp();
    (2.0 * lower).clamp(0.0, 1.0)
}
