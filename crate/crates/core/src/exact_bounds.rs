//! Exact binomial lower tail and the one-sided Clopper–Pearson upper bound.
//!
//! The tail `P(Bin(n, p) <= k)` is summed in log space: every term
//! `ln C(n, i) + i ln p + (n - i) ln(1 - p)` is shifted by the largest term,
//! exponentiated, and accumulated with Kahan compensation before a final
//! `exp` restores the scale. The upper bound is the root of
//! `R -> P(Bin(n, R) <= k) - delta`, found by bisection; the map is
//! continuous and strictly decreasing on `(0, 1)` whenever `k < n`.

use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::factorial::ln_binomial;

use crate::error::{check_open_unit, invalid, Result};

/// Bracket width at which bisection stops.
pub const BISECTION_TOL: f64 = 1e-12;
/// Iteration cap for bisection.
pub const BISECTION_MAX_ITER: usize = 200;

/// Lower tail of a binomial distribution, validated on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialTail {
    n: u64,
    k: u64,
    p: f64,
}

impl BinomialTail {
    pub fn new(k: u64, n: u64, p: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", n, "must be positive"));
        }
        if k > n {
            return Err(invalid("k", k, "must not exceed n"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("p", p, "must lie in [0, 1]"));
        }
        Ok(Self { n, k, p })
    }

    /// `P(X <= k)` for `X ~ Bin(n, p)`.
    pub fn cdf(&self) -> f64 {
        let Self { n, k, p } = *self;
        if k == n || p == 0.0 {
            return 1.0;
        }
        if p == 1.0 {
            return 0.0;
        }
        let ln_p = p.ln();
        let ln_q = (-p).ln_1p();
        let log_terms: Vec<f64> = (0..=k)
            .map(|i| ln_binomial(n, i) + i as f64 * ln_p + (n - i) as f64 * ln_q)
            .collect();
        let shift = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return 0.0;
        }
        let mut sum = 0.0_f64;
        let mut carry = 0.0_f64;
        for t in &log_terms {
            let y = (t - shift).exp() - carry;
            let next = sum + y;
            carry = (next - sum) - y;
            sum = next;
        }
        (shift + sum.ln()).exp().clamp(0.0, 1.0)
    }
}

/// `P(X <= k)` for `X ~ Bin(n, p)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    Ok(BinomialTail::new(k, n, p)?.cdf())
}

/// `sup { R in [0, 1] : P(Bin(n, R) <= k) >= delta }`.
///
/// Returns exactly `1.0` when `k == n`. Otherwise returns the upper end of
/// the final bisection bracket, so the result is never below the exact root
/// and exceeds it by at most [`BISECTION_TOL`].
pub fn clopper_pearson_upper(k: u64, n: u64, delta: f64) -> Result<f64> {
    check_open_unit("delta", delta)?;
    BinomialTail::new(k, n, 0.0)?;
    if k == n {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..BISECTION_MAX_ITER {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let tail = BinomialTail { n, k, p: mid }.cdf();
        if tail >= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// The same bound through the Beta quantile `Beta(k + 1, n - k)^{-1}(1 - delta)`.
///
/// Kept as a cross-check of [`clopper_pearson_upper`]; its accuracy is
/// limited by the incomplete-beta inversion (about `1e-8`).
pub fn clopper_pearson_upper_beta(k: u64, n: u64, delta: f64) -> Result<f64> {
    check_open_unit("delta", delta)?;
    BinomialTail::new(k, n, 0.0)?;
    if k == n {
        return Ok(1.0);
    }
    let dist = Beta::new((k + 1) as f64, (n - k) as f64)
        .map_err(|_| invalid("n", n, "degenerate beta parameters"))?;
    Ok(dist.inverse_cdf(1.0 - delta))
}
