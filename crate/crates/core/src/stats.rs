//! Exact statistical primitives: the standard normal CDF and quantile, the
//! binomial tail, the one-sided Clopper-Pearson lower bound and the exact
//! two-sided binomial test.
//!
//! Nothing here depends on a numerics library. The normal CDF is accurate to
//! about 1e-15 absolute (and keeps relative accuracy deep into the lower
//! tail); the quantile is found by bisection on that CDF, and the
//! Clopper-Pearson bound by bisection on the binomial upper tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability in `[0, 1]`. NaN is rejected.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Probability(value))
        } else {
            Err(Error::domain(format!("probability {value} not in [0, 1]")))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Probability::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// Significance level `alpha` of a confidence bound, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ConfidenceLevel(f64);

impl ConfidenceLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(ConfidenceLevel(alpha))
        } else {
            Err(Error::domain(format!("alpha {alpha} not in (0, 1)")))
        }
    }

    #[inline]
    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ConfidenceLevel {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        ConfidenceLevel::new(value)
    }
}

impl From<ConfidenceLevel> for f64 {
    fn from(c: ConfidenceLevel) -> f64 {
        c.0
    }
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Switch point between the erf series and the erfc continued fraction.
const SERIES_LIMIT: f64 = 2.5;

/// `erf(z)` for `0 <= z < SERIES_LIMIT` via
/// `erf z = 2/sqrt(pi) * exp(-z^2) * sum_n 2^n z^(2n+1) / (2n+1)!!`.
/// Every term is positive, so there is no cancellation.
fn erf_series(z: f64) -> f64 {
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
    FRAC_2_SQRT_PI * (-z2).exp() * sum
}

/// `erfc(z)` for `z >= SERIES_LIMIT` via the Laplace continued fraction
/// `erfc z = exp(-z^2)/sqrt(pi) / (z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))`,
/// evaluated bottom-up.
fn erfc_continued_fraction(z: f64) -> f64 {
    const TERMS: usize = 120;
    let mut t = z;
    for n in (1..=TERMS).rev() {
        t = z + (n as f64 * 0.5) / t;
    }
    FRAC_1_SQRT_PI * (-z * z).exp() / t
}

/// `erfc(z)` for `z >= 0`.
fn erfc_nonneg(z: f64) -> f64 {
    if z < SERIES_LIMIT {
        1.0 - erf_series(z)
    } else {
        erfc_continued_fraction(z)
    }
}

/// Standard normal CDF on raw floats; the caller guarantees `x` is finite.
pub(crate) fn phi(x: f64) -> f64 {
    let z = x.abs() * std::f64::consts::FRAC_1_SQRT_2;
    if x >= 0.0 {
        if z < SERIES_LIMIT {
            0.5 + 0.5 * erf_series(z)
        } else {
            1.0 - 0.5 * erfc_continued_fraction(z)
        }
    } else {
        0.5 * erfc_nonneg(z)
    }
}

/// The standard Gaussian CDF.
pub fn std_normal_cdf(x: f64) -> Result<Probability> {
    if !x.is_finite() {
        return Err(Error::domain(format!("normal cdf of non-finite {x}")));
    }
    Ok(Probability(phi(x)))
}

/// Quantile on raw floats; `p` must be strictly inside `(0, 1)`.
pub(crate) fn phi_inv(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    // 1 - p is exact for p >= 0.5, so folding onto the lower half keeps
    // the relative accuracy of the lower tail for both halves.
    if p > 0.5 {
        return -phi_inv_lower(1.0 - p);
    }
    phi_inv_lower(p)
}

fn phi_inv_lower(p: f64) -> f64 {
    // phi(-39) underflows below the smallest subnormal.
    let (mut lo, mut hi) = (-39.0_f64, 0.0_f64);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The standard Gaussian quantile `Phi^-1(p)`. Infinite at 0 and 1, so both
/// endpoints are rejected.
pub fn std_normal_quantile(p: Probability) -> Result<f64> {
    let p = p.get();
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::domain(format!(
            "normal quantile of {p} is infinite; clamp into (0, 1)"
        )));
    }
    Ok(phi_inv(p))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
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

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `P[X >= k]` for `X ~ Binomial(n, p)`.
///
/// Sums the pmf outward from `max(k, mode)` using the ratio recurrence, so the
/// largest term is computed directly and every other term is a product of
/// ratios below one. Summation stops once terms fall below 1e-17 of the sum.
pub(crate) fn binom_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let q = 1.0 - p;
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);
    let start = k.max(mode);
    let log_start = ln_choose(n, start) + start as f64 * p.ln() + (n - start) as f64 * (-p).ln_1p();
    let first = log_start.exp();
    if first == 0.0 && start > mode {
        return 0.0;
    }
    let up_ratio = p / q;
    let mut sum = first;
    let mut term = first;
    for i in (start + 1)..=n {
        term *= (n - i + 1) as f64 / i as f64 * up_ratio;
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    let down_ratio = q / p;
    term = first;
    let mut i = start;
    while i > k {
        // pmf(i - 1) = pmf(i) * i / (n - i + 1) * q / p
        term *= i as f64 / (n - i + 1) as f64 * down_ratio;
        sum += term;
        i -= 1;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum.min(1.0)
}

/// `P[X <= k]` for `X ~ Binomial(n, p)`, computed as the upper tail of
/// `n - X ~ Binomial(n, 1 - p)` so that the two tails share one code path.
pub(crate) fn binom_lower_tail(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    binom_upper_tail(n - k, n, 1.0 - p)
}

fn check_counts(successes: u64, trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::domain("binomial with zero trials"));
    }
    if successes > trials {
        return Err(Error::domain(format!(
            "{successes} successes exceed {trials} trials"
        )));
    }
    Ok(())
}

/// One-sided exact (Clopper-Pearson) lower confidence bound on a binomial
/// proportion: the `L` with `P[Binomial(trials, L) >= successes] = alpha`,
/// i.e. the `alpha`-quantile of `Beta(successes, trials - successes + 1)`.
///
/// Bisection keeps the invariant `tail(lo) < alpha <= tail(hi)` and returns
/// `lo`, so rounding never makes the bound optimistic.
pub fn clopper_pearson_lower(
    successes: u64,
    trials: u64,
    alpha: ConfidenceLevel,
) -> Result<Probability> {
    check_counts(successes, trials)?;
    let alpha = alpha.alpha();
    if successes == 0 {
        return Ok(Probability(0.0));
    }
    if successes == trials {
        return Ok(Probability(alpha.powf(1.0 / trials as f64)));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binom_upper_tail(successes, trials, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Probability(lo))
}

/// Exact two-sided binomial test p-value,
/// `min(1, 2 * min(P[X <= k], P[X >= k]))` with `X ~ Binomial(trials, p0)`.
pub fn binom_two_sided_pvalue(successes: u64, trials: u64, p0: Probability) -> Result<Probability> {
    check_counts(successes, trials)?;
    let p0 = p0.get();
    let lower = binom_lower_tail(successes, trials, p0);
    let upper = binom_upper_tail(successes, trials, p0);
    Ok(Probability((2.0 * lower.min(upper)).min(1.0)))
}
