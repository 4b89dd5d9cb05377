//! Normal and Student-t distribution functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use super::StatsError;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal upper tail, `1 - normal_cdf(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse of the standard normal CDF.
///
/// Wichura's AS241 rational approximation followed by one Newton step
/// against the erfc-based CDF.
pub fn normal_quantile(p: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::Domain(format!(
            "normal_quantile: p = {p} not in (0, 1)"
        )));
    }
    let x = ppnd16(p);
    // Newton polish on whichever tail keeps the residual well conditioned.
    let resid = if p < 0.5 {
        normal_cdf(x) - p
    } else {
        (1.0 - p) - normal_sf(x)
    };
    let pdf = normal_pdf(x);
    if pdf > 0.0 {
        Ok(x - resid / pdf)
    } else {
        Ok(x)
    }
}

#[allow(clippy::excessive_precision)]
fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_854_5e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_8,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];

    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let p = if t2 < df {
        1.0 - beta_reg(0.5, 0.5 * df, t2 / (df + t2))
    } else {
        beta_reg(0.5 * df, 0.5, df / (df + t2))
    };
    p.clamp(0.0, 1.0)
}

/// Student-t CDF.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let half_tail = 0.5 * t_two_sided_p(t, df);
    if t > 0.0 {
        1.0 - half_tail
    } else {
        half_tail
    }
}

fn t_pdf(t: f64, df: f64) -> f64 {
    let ln = ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * PI).ln()
        - 0.5 * (df + 1.0) * (t * t / df).ln_1p();
    ln.exp()
}

/// Inverse Student-t CDF for `df >= 1` (real-valued degrees of freedom).
pub fn t_quantile(p: f64, df: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::Domain(format!(
            "t_quantile: p = {p} not in (0, 1)"
        )));
    }
    if !(df >= 1.0) || !df.is_finite() {
        return Err(StatsError::Domain(format!(
            "t_quantile: df = {df} must be >= 1"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve for the upper tail mass q = min(p, 1-p) and restore the sign.
    let upper = p > 0.5;
    let q = if upper { 1.0 - p } else { p };
    if df == 1.0 {
        let t = (PI * (0.5 - q)).tan();
        return Ok(if upper { t } else { -t });
    }
    if df == 2.0 {
        let t = (1.0 - 2.0 * q) / (2.0 * q * (1.0 - q)).sqrt();
        return Ok(if upper { t } else { -t });
    }

    // Cornish-Fisher start, then safeguarded Newton on the upper tail.
    let z = -normal_quantile(q)?;
    let z3 = z * z * z;
    let mut t =
        z + (z3 + z) / (4.0 * df) + (5.0 * z3 * z * z + 16.0 * z3 + 3.0 * z) / (96.0 * df * df);
    let tail = |x: f64| 0.5 * t_two_sided_p(x, df);
    let mut lo = 0.0_f64;
    let mut hi = t.max(1.0);
    while tail(hi) > q {
        lo = hi;
        hi *= 2.0;
    }
    if !(t > lo && t < hi) {
        t = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = tail(t) - q;
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let step = f / t_pdf(t, df);
        let mut next = t + step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let done = (next - t).abs() <= 1e-15 * t.abs().max(1.0);
        t = next;
        if done || hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(if upper { t } else { -t })
}
