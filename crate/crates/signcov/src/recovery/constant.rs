//! Closed-form estimators for a constant (non-zero) threshold, and the
//! dithered-threshold wrapper that reduces to them on the shifted
//! covariance.
//!
//! Scales come from inverting the marginal tail probability,
//! `sigma_hat = v / Q^{-1}(p_hat)`. The correlation comes from the joint
//! ++ probability: with a_i = v / sigma_hat_i,
//!
//! ```text
//! p12(rho) = Q(a1) Q(a2)
//!          + exp(-(a1^2 + a2^2)/2) / pi
//!            * sum_{k>=0} H_k(a1/sqrt2) H_k(a2/sqrt2)
//!                          / (2^{k+1} (k+1)!) * rho^{k+1}
//! ```
//!
//! (the Mehler expansion of the bivariate density integrated over the
//! orthant; at zero thresholds it collapses to the arcsine series). The
//! truncated polynomial is solved for `rho`; when no usable root exists
//! the exact orthant probability is inverted by bisection instead, which
//! is valid because `d p12 / d rho` is the (positive) bivariate density by
//! Price's theorem.

use crate::error::{Error, Result};
use crate::gauss::{bvn_orthant_raw, hermite, q_inv_raw, q_raw, CORR_CLAMP};
use crate::quantizer::{clamp_rho, OneBitBatch, PairParams, ScheduleKind};
use crate::recovery::{Method, PairEstimate, PairFlags, StageIterations};
use std::f64::consts::{FRAC_PI_2, PI};

/// Guard band around p = 1/2 where the scale estimate has a pole.
const HALF_GUARD: f64 = 1e-6;

/// Scale estimate from a +1 count at a constant threshold `v`.
pub fn const_sigma(plus: f64, n: f64, v: f64) -> Result<f64> {
    if v == 0.0 {
        return Err(Error::Unidentifiable(
            "a zero threshold carries no amplitude information".into(),
        ));
    }
    if n <= 0.0 {
        return Err(Error::Dimension("empty sample".into()));
    }
    if plus <= 0.0 || plus >= n {
        return Err(Error::Saturated {
            channel: 0,
            detail: format!("{plus} of {n} samples positive"),
        });
    }
    let p_hat = plus / n;
    if (p_hat - 0.5).abs() < HALF_GUARD {
        return Err(Error::IllPosed(format!(
            "p_hat = {p_hat} within {HALF_GUARD} of 1/2; scale estimate diverges"
        )));
    }
    let sigma = v / q_inv_raw(p_hat);
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::IllPosed(format!(
            "p_hat = {p_hat} on the wrong side of 1/2 for threshold {v}"
        )));
    }
    Ok(sigma)
}

/// Truncated correlation polynomial: series(rho) approximates
/// p12(rho) - Q(a1) Q(a2).
struct RhoSeries {
    /// coeffs[k] multiplies rho^{k+1}.
    coeffs: Vec<f64>,
}

impl RhoSeries {
    fn build(a1: f64, a2: f64, order: usize) -> Self {
        let prefactor = (-(a1 * a1 + a2 * a2) / 2.0).exp() / PI;
        let b1 = a1 / std::f64::consts::SQRT_2;
        let b2 = a2 / std::f64::consts::SQRT_2;
        let mut coeffs = Vec::with_capacity(order + 1);
        let mut denom = 2.0; // 2^{k+1} (k+1)! at k = 0
        for k in 0..=order {
            coeffs.push(prefactor * hermite(k, b1) * hermite(k, b2) / denom);
            denom *= 2.0 * (k as f64 + 2.0);
        }
        RhoSeries { coeffs }
    }

    fn eval(&self, rho: f64) -> f64 {
        // Horner in rho, then one extra multiply for the leading rho^1.
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * rho + c;
        }
        acc * rho
    }

    fn deriv(&self, rho: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate().rev() {
            acc = acc * rho + c * (k as f64 + 1.0);
        }
        acc
    }

    /// All roots of eval(rho) = target inside the open interval, found by
    /// scanning for sign changes and bisecting each bracket.
    fn roots(&self, target: f64, lo: f64, hi: f64) -> Vec<f64> {
        const GRID: usize = 2000;
        let mut out = Vec::new();
        let mut prev_x = lo;
        let mut prev_f = self.eval(lo) - target;
        for i in 1..=GRID {
            let x = lo + (hi - lo) * i as f64 / GRID as f64;
            let f = self.eval(x) - target;
            if prev_f == 0.0 {
                out.push(prev_x);
            } else if prev_f * f < 0.0 {
                let (mut a, mut b) = (prev_x, x);
                let mut fa = prev_f;
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    let fm = self.eval(m) - target;
                    if fa * fm <= 0.0 {
                        b = m;
                    } else {
                        a = m;
                        fa = fm;
                    }
                }
                out.push(0.5 * (a + b));
            }
            prev_x = x;
            prev_f = f;
        }
        out
    }
}

/// Outcome of the correlation solve.
#[derive(Debug, Clone, Copy)]
pub struct RhoFit {
    pub rho: f64,
    /// Set when the truncated series produced no usable root and the exact
    /// orthant probability was inverted instead.
    pub orthant_fallback: bool,
}

/// Solve for the correlation from the joint ++ probability estimate, with
/// previously estimated scales.
///
/// `series_order` is the truncation order of the polynomial (degree is
/// `series_order + 1`). Among the real roots inside (-1, 1), the one
/// nearest the arcsine-law initial guess is returned.
pub fn const_rho(
    p12_hat: f64,
    v: f64,
    sigma1_hat: f64,
    sigma2_hat: f64,
    series_order: usize,
) -> Result<RhoFit> {
    if v == 0.0 {
        return Err(Error::Unidentifiable("zero threshold".into()));
    }
    if sigma1_hat <= 0.0 || sigma2_hat <= 0.0 {
        return Err(Error::Domain("scale estimates must be positive".into()));
    }
    if series_order == 0 {
        return Err(Error::Domain("series order must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p12_hat) {
        return Err(Error::Domain(format!("p12_hat = {p12_hat} outside [0, 1]")));
    }
    let a1 = v / sigma1_hat;
    let a2 = v / sigma2_hat;
    let p1 = q_raw(a1);
    let p2 = q_raw(a2);
    let target = p12_hat - p1 * p2;

    // Arcsine-law initial guess from the implied sign second moment.
    let e_x1x2 = 4.0 * p12_hat - 2.0 * p1 - 2.0 * p2 + 1.0;
    let guess = clamp_rho((FRAC_PI_2 * e_x1x2.clamp(-1.0, 1.0)).sin());

    let lo = -1.0 + CORR_CLAMP;
    let hi = 1.0 - CORR_CLAMP;
    let series = RhoSeries::build(a1, a2, series_order);

    // Fast path: Newton from the guess.
    let mut rho = guess;
    for _ in 0..60 {
        let f = series.eval(rho) - target;
        let d = series.deriv(rho);
        if d == 0.0 {
            break;
        }
        let next = (rho - f / d).clamp(lo, hi);
        let moved = (next - rho).abs();
        rho = next;
        if moved < 1e-14 {
            break;
        }
    }
    if (series.eval(rho) - target).abs() <= 1e-12 && rho > lo && rho < hi {
        return Ok(RhoFit {
            rho,
            orthant_fallback: false,
        });
    }

    // Collect every root in the interval and keep the one nearest the
    // guess.
    let roots = series.roots(target, lo, hi);
    if let Some(best) = roots
        .into_iter()
        .min_by(|a, b| (a - guess).abs().partial_cmp(&(b - guess).abs()).unwrap())
    {
        return Ok(RhoFit {
            rho: best,
            orthant_fallback: false,
        });
    }

    // No real root in range: invert the exact orthant probability, which
    // is strictly increasing in rho.
    let f_lo = bvn_orthant_raw(a1, a2, lo);
    let f_hi = bvn_orthant_raw(a1, a2, hi);
    let rho = if p12_hat <= f_lo {
        lo
    } else if p12_hat >= f_hi {
        hi
    } else {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if bvn_orthant_raw(a1, a2, m) < p12_hat {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    Ok(RhoFit {
        rho,
        orthant_fallback: true,
    })
}

/// Marginal and joint counts of a channel pair over the whole batch.
pub(crate) fn pair_counts(batch: &OneBitBatch, ch1: usize, ch2: usize) -> (f64, f64, f64, f64) {
    let n = batch.len();
    let (mut plus1, mut plus2, mut plus12) = (0u64, 0u64, 0u64);
    for t in 0..n {
        let x1 = batch.sign(ch1, t) == 1;
        let x2 = batch.sign(ch2, t) == 1;
        plus1 += u64::from(x1);
        plus2 += u64::from(x2);
        plus12 += u64::from(x1 && x2);
    }
    (plus1 as f64, plus2 as f64, plus12 as f64, n as f64)
}

/// Full pair recovery for a constant-threshold batch.
pub fn const_pair(
    batch: &OneBitBatch,
    ch1: usize,
    ch2: usize,
    series_order: usize,
) -> Result<PairEstimate> {
    let level = match batch.schedule().kind() {
        ScheduleKind::Constant { level } => *level,
        other => {
            return Err(Error::Usage(format!(
                "constant-threshold estimator needs a constant schedule, got {other:?}"
            )))
        }
    };
    let (plus1, plus2, plus12, n) = pair_counts(batch, ch1, ch2);
    let s1 = const_sigma(plus1, n, level).map_err(|e| tag_channel(e, ch1))?;
    let s2 = const_sigma(plus2, n, level).map_err(|e| tag_channel(e, ch2))?;
    let fit = const_rho(plus12 / n, level, s1, s2, series_order)?;
    let rho = clamp_rho(fit.rho);
    Ok(PairEstimate {
        params: PairParams::new(s1, s2, rho * s1 * s2)?,
        method: Method::Constant,
        iterations: StageIterations::default(),
        converged: true,
        flags: PairFlags {
            orthant_fallback: fit.orthant_fallback,
            ..PairFlags::default()
        },
    })
}

/// Pair recovery for a Gaussian-dithered batch: estimate the shifted
/// covariance with the constant-threshold formulas, then remove the dither
/// variance from the diagonal. The off-diagonal needs no correction
/// because the dither is independent across channels.
pub fn dither_pair(
    batch: &OneBitBatch,
    ch1: usize,
    ch2: usize,
    series_order: usize,
) -> Result<PairEstimate> {
    let (level, std) = match batch.schedule().kind() {
        ScheduleKind::GaussianDither { level, std } => (*level, *std),
        other => {
            return Err(Error::Usage(format!(
                "dither estimator needs a dithered schedule, got {other:?}"
            )))
        }
    };
    let (plus1, plus2, plus12, n) = pair_counts(batch, ch1, ch2);
    let s1_shifted = const_sigma(plus1, n, level).map_err(|e| tag_channel(e, ch1))?;
    let s2_shifted = const_sigma(plus2, n, level).map_err(|e| tag_channel(e, ch2))?;
    let fit = const_rho(plus12 / n, level, s1_shifted, s2_shifted, series_order)?;
    let sigma12 = clamp_rho(fit.rho) * s1_shifted * s2_shifted;

    let var = std * std;
    let unshift = |s: f64, ch: usize| -> Result<f64> {
        let v = s * s - var;
        if v <= 0.0 {
            return Err(Error::IllPosed(format!(
                "channel {ch}: shifted variance estimate {s}^2 does not exceed the dither variance {var}"
            )));
        }
        Ok(v.sqrt())
    };
    let s1 = unshift(s1_shifted, ch1)?;
    let s2 = unshift(s2_shifted, ch2)?;
    // Keep sigma12 inside the recovered positive-definite region.
    let bound = s1 * s2 * (1.0 - CORR_CLAMP);
    let sigma12 = sigma12.clamp(-bound, bound);
    Ok(PairEstimate {
        params: PairParams::new(s1, s2, sigma12)?,
        method: Method::Constant,
        iterations: StageIterations::default(),
        converged: true,
        flags: PairFlags {
            orthant_fallback: fit.orthant_fallback,
            dither_unshifted: true,
            ..PairFlags::default()
        },
    })
}

fn tag_channel(e: Error, channel: usize) -> Error {
    match e {
        Error::Saturated { detail, .. } => Error::Saturated { channel, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn const_sigma_inverse_consistency() {
        // p_hat exactly Q(2) with v = 0.5 gives sigma = 0.25.
        let p = q_raw(2.0);
        let n = 1e6;
        let sigma = const_sigma(p * n, n, 0.5).unwrap();
        assert_abs_diff_eq!(sigma, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn const_sigma_pole_and_saturation() {
        assert!(matches!(
            const_sigma(0.5e6 - 0.1, 1e6, 0.5),
            Err(Error::IllPosed(_))
        ));
        assert!(matches!(
            const_sigma(0.0, 1000.0, 0.5),
            Err(Error::Saturated { .. })
        ));
        assert!(matches!(
            const_sigma(1000.0, 1000.0, 0.5),
            Err(Error::Saturated { .. })
        ));
        assert!(matches!(
            const_sigma(300.0, 1000.0, 0.0),
            Err(Error::Unidentifiable(_))
        ));
    }

    #[test]
    fn const_sigma_scale_equivariance() {
        let base = const_sigma(100.0, 1000.0, 0.5).unwrap();
        let scaled = const_sigma(100.0, 1000.0, 2.0).unwrap();
        assert_abs_diff_eq!(scaled, 4.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn const_rho_independence_gives_zero() {
        // p12 = p1 p2 puts the series target at zero.
        let (s1, s2, v) = (0.7, 1.1, 0.5);
        let p1 = q_raw(v / s1);
        let p2 = q_raw(v / s2);
        let fit = const_rho(p1 * p2, v, s1, s2, 20).unwrap();
        assert_abs_diff_eq!(fit.rho, 0.0, epsilon = 1e-10);
        assert!(!fit.orthant_fallback);
    }

    #[test]
    fn const_rho_exact_probabilities_equal_variances() {
        // Exact p12 fed in; the truncated series must return rho to 1e-4.
        let (s1, s2, v, rho) = (1.0, 1.0, 0.5, 0.5);
        let p12 = bvn_orthant_raw(v / s1, v / s2, rho);
        let fit = const_rho(p12, v, s1, s2, 20).unwrap();
        assert_abs_diff_eq!(fit.rho, rho, epsilon = 1e-4);
    }

    #[test]
    fn const_rho_exact_probabilities_unequal_variances() {
        let (s1, s2, v) = (0.25, 0.6, 0.5);
        let rho = -0.08 / (0.25 * 0.6);
        let p12 = bvn_orthant_raw(v / s1, v / s2, rho);
        let fit = const_rho(p12, v, s1, s2, 20).unwrap();
        // Bisection on the exact orthant probability as oracle.
        let lo = -1.0 + CORR_CLAMP;
        let hi = 1.0 - CORR_CLAMP;
        let (mut a, mut b) = (lo, hi);
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if bvn_orthant_raw(v / s1, v / s2, m) < p12 {
                a = m;
            } else {
                b = m;
            }
        }
        let oracle = 0.5 * (a + b);
        assert_abs_diff_eq!(fit.rho, oracle, epsilon = 1e-3);
        assert_abs_diff_eq!(fit.rho, rho, epsilon = 1e-3);
    }

    #[test]
    fn const_rho_falls_back_when_target_unreachable() {
        // A joint probability above every series value forces the orthant
        // inversion path and lands on the upper clamp.
        let fit = const_rho(0.9, 0.5, 1.0, 1.0, 20).unwrap();
        assert!(fit.orthant_fallback);
        assert!(fit.rho > 0.99);
    }
}
