//! Normal and Student-t distribution functions, exact binomial tails,
//! one-sided DKW/Hoeffding bounds and the paired t statistic.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Complementary error function for `z >= 0`, relative error near machine
/// precision. Power series below 2.5, Lentz continued fraction above.
fn erfc_nonneg(z: f64) -> f64 {
    if z < 2.5 {
        // erf(z) = 2/sqrt(pi) e^{-z^2} sum 2^n z^{2n+1} / (2n+1)!!
        let z2 = z * z;
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= 2.0 * z2 / (2.0 * n + 1.0);
            sum += term;
            if term <= sum * 1e-17 {
                break;
            }
        }
        1.0 - 2.0 * FRAC_1_SQRT_PI * (-z2).exp() * sum
    } else {
        // erfc(z) = e^{-z^2}/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
        let tiny = 1e-300;
        let mut f = z;
        let mut c = z;
        let mut d = 0.0;
        for n in 1..500 {
            let a = n as f64 / 2.0;
            d = z + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = z + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-z * z).exp() * FRAC_1_SQRT_PI / f
    }
}

pub fn erfc(z: f64) -> f64 {
    if z >= 0.0 {
        erfc_nonneg(z)
    } else {
        2.0 - erfc_nonneg(-z)
    }
}

/// Standard normal CDF. Accurate in relative terms in the lower tail.
pub fn phi(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        0.5 * erfc_nonneg(-x / SQRT_2)
    } else {
        1.0 - 0.5 * erfc_nonneg(x / SQRT_2)
    }
}

/// Upper tail `1 - phi(x)` without cancellation.
pub fn phi_upper(x: f64) -> f64 {
    phi(-x)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Rational starting point for the lower-tail quantile (Acklam's algorithm).
fn quantile_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Standard normal quantile, refined by guarded Newton steps on `phi`.
pub fn phi_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let mut x = quantile_guess(p);
    for _ in 0..50 {
        let f = phi(x);
        let dens = normal_pdf(x);
        if dens <= 0.0 {
            break;
        }
        // Newton on ln phi keeps steps well scaled deep in the tail.
        let step = (f.ln() - p.ln()) * f / dens;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the regularized incomplete beta.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`; `one_minus_x` is passed in so
/// callers can supply it without cancellation.
fn inc_beta(a: f64, b: f64, x: f64, one_minus_x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * one_minus_x.ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, one_minus_x) / b
    }
}

/// Student-t CDF with `dof` degrees of freedom.
pub fn t_cdf(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let t2 = t * t;
    let x = dof / (dof + t2);
    let tail = 0.5 * inc_beta(dof / 2.0, 0.5, x, t2 / (dof + t2));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn t_pdf(t: f64, dof: f64) -> f64 {
    (ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * PI).ln()
        - (dof + 1.0) / 2.0 * (1.0 + t * t / dof).ln())
    .exp()
}

/// Student-t quantile by bracketed Newton iteration on `t_cdf`.
pub fn t_quantile(p: f64, dof: u64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("t quantile needs p in (0,1), got {p}")));
    }
    if dof == 0 {
        return invalid("t quantile needs at least one degree of freedom");
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return t_quantile(1.0 - p, dof).map(|v| -v);
    }
    let nu = dof as f64;
    let mut lo = 0.0;
    let mut hi = phi_inv(p)?.max(1.0);
    while t_cdf(hi, nu) < p {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numeric("t quantile bracket overflow".into()));
        }
    }
    let mut x = phi_inv(p)?.clamp(lo, hi);
    for _ in 0..200 {
        let f = t_cdf(x, nu) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = t_pdf(x, nu);
        let mut next = x - f / dens;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-13 * x.abs().max(1.0) || hi - lo <= 1e-14 * hi.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn binom_log_terms(range: std::ops::RangeInclusive<u64>, n: u64, p0: f64) -> Vec<f64> {
    range
        .map(|i| {
            let mut t = ln_choose(n, i);
            if i > 0 {
                t += i as f64 * p0.ln();
            }
            if n - i > 0 {
                t += (n - i) as f64 * (1.0 - p0).ln();
            }
            t
        })
        .collect()
}

fn check_binom(k: u64, n: u64, p0: f64) -> Result<()> {
    if k > n {
        return invalid(format!("binomial tail needs k <= n, got k={k}, n={n}"));
    }
    if !(0.0..=1.0).contains(&p0) {
        return invalid(format!("binomial success probability {p0} outside [0,1]"));
    }
    Ok(())
}

/// Exact `P(X >= k)` for `X ~ Binomial(n, p0)`, summed in log space.
pub fn binom_sf(k: u64, n: u64, p0: f64) -> Result<f64> {
    check_binom(k, n, p0)?;
    if k == 0 {
        return Ok(1.0);
    }
    if p0 == 0.0 {
        return Ok(0.0);
    }
    if p0 == 1.0 {
        return Ok(1.0);
    }
    Ok(log_sum_exp(&binom_log_terms(k..=n, n, p0)).exp().min(1.0))
}

/// Exact `P(X <= k)` for `X ~ Binomial(n, p0)`.
pub fn binom_cdf(k: u64, n: u64, p0: f64) -> Result<f64> {
    check_binom(k, n, p0)?;
    if k == n {
        return Ok(1.0);
    }
    if p0 == 0.0 {
        return Ok(1.0);
    }
    if p0 == 1.0 {
        return Ok(0.0);
    }
    Ok(log_sum_exp(&binom_log_terms(0..=k, n, p0)).exp().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// A one-sided confidence bound on a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBound {
    pub point_estimate: f64,
    pub bound: f64,
    pub side: Side,
    pub confidence: f64,
    pub n: usize,
}

fn bound_width(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("confidence parameter delta={delta} outside (0,1)"));
    }
    Ok(((1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// One-sided DKW lower bound `max(0, emp - sqrt(ln(1/delta) / 2n))`.
pub fn dkw_lower(empirical: f64, n: usize, delta: f64) -> Result<ConfidenceBound> {
    let w = bound_width(n, delta)?;
    Ok(ConfidenceBound {
        point_estimate: empirical,
        bound: (empirical - w).max(0.0),
        side: Side::Lower,
        confidence: 1.0 - delta,
        n,
    })
}

/// One-sided Hoeffding upper bound `min(1, emp + sqrt(ln(1/delta) / 2n))`.
pub fn hoeffding_upper(empirical: f64, n: usize, delta: f64) -> Result<ConfidenceBound> {
    let w = bound_width(n, delta)?;
    Ok(ConfidenceBound {
        point_estimate: empirical,
        bound: (empirical + w).min(1.0),
        side: Side::Upper,
        confidence: 1.0 - delta,
        n,
    })
}

/// Value of the paired t statistic, including the zero-variance cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TStatistic {
    Finite(f64),
    /// `s_D = 0` with a positive mean difference.
    PositiveInfinite,
    /// `s_D = 0` with a nonpositive mean difference.
    DegenerateNonReject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub statistic: TStatistic,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub n: usize,
}

impl PairedT {
    /// One-sided test of `E[D] > 0` at level `alpha` against `t_{1-alpha}(N-1)`.
    pub fn rejects(&self, alpha: f64) -> Result<bool> {
        match self.statistic {
            TStatistic::PositiveInfinite => Ok(true),
            TStatistic::DegenerateNonReject => Ok(false),
            TStatistic::Finite(t) => Ok(t > t_quantile(1.0 - alpha, self.n as u64 - 1)?),
        }
    }

    /// Numeric value, with the degenerate cases mapped to `+inf` and `0`.
    pub fn value(&self) -> f64 {
        match self.statistic {
            TStatistic::Finite(t) => t,
            TStatistic::PositiveInfinite => f64::INFINITY,
            TStatistic::DegenerateNonReject => 0.0,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// `T = sqrt(N) * mean(D) / s_D`.
pub fn paired_t_statistic(diffs: &[f64]) -> Result<PairedT> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let dbar = mean(diffs);
    let sd = sample_variance(diffs).max(0.0).sqrt();
    let statistic = if sd > 0.0 {
        TStatistic::Finite((n as f64).sqrt() * dbar / sd)
    } else if dbar > 0.0 {
        TStatistic::PositiveInfinite
    } else {
        TStatistic::DegenerateNonReject
    };
    Ok(PairedT { statistic, mean_diff: dbar, sd_diff: sd, n })
}

/// Plug-in standard deviation of per-image differences,
/// `sqrt((WR(1-WR) + RP(1-RP)) / M)`.
pub fn plug_in_sd(wr: f64, rp: f64, m: usize) -> f64 {
    ((wr * (1.0 - wr) + rp * (1.0 - rp)) / m as f64).sqrt()
}
