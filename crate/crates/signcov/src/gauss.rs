//! Scalar and bivariate Gaussian special functions.
//!
//! Everything downstream (likelihoods, closed-form estimators, error
//! analysis) is built on the upper-tail probability `Q`, its inverse, the
//! bivariate normal density and orthant probability, and the kernel `g`
//! that appears in the derivative of the orthant probability with respect
//! to a standard deviation.
//!
//! The orthant probability is evaluated with the Drezner-Wesolowsky /
//! Genz scheme (Gauss-Legendre quadrature over the transformed correlation
//! integral), which is accurate to roughly 5e-16 absolute. `Q^{-1}` uses
//! Acklam's rational approximation polished by two Halley steps.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// sqrt(2*pi)
pub const SQRT_2PI: f64 = 2.506628274631000502415765284811;

/// Correlations are clamped this far inside the open interval (-1, 1).
pub const CORR_CLAMP: f64 = 1e-9;

/// A probability in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Prob(f64);

impl Prob {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Prob(value))
        } else {
            Err(Error::Domain(format!("probability {value} outside [0, 1]")))
        }
    }

    pub(crate) fn new_unchecked(value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value));
        Prob(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A correlation coefficient strictly inside (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Corr(f64);

impl Corr {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value.abs() < 1.0 {
            Ok(Corr(value))
        } else {
            Err(Error::Domain(format!(
                "correlation {value} outside open interval (-1, 1)"
            )))
        }
    }

    /// Clamp an arbitrary value into [-1 + CORR_CLAMP, 1 - CORR_CLAMP].
    pub fn clamped(value: f64) -> Self {
        Corr(value.clamp(-1.0 + CORR_CLAMP, 1.0 - CORR_CLAMP))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Standard normal density.
#[inline]
pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF, computed through erfc for tail accuracy.
#[inline]
pub(crate) fn phid(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[inline]
pub(crate) fn q_raw(a: f64) -> f64 {
    0.5 * libm::erfc(a * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper-tail probability of the standard normal, Q(a) = Pr{Z > a}.
pub fn q(a: f64) -> Result<Prob> {
    if !a.is_finite() {
        return Err(Error::Domain(format!("q: non-finite argument {a}")));
    }
    Ok(Prob::new_unchecked(q_raw(a)))
}

// Acklam's rational approximation to the standard normal quantile.
// Relative error below 1.2e-9 over (0, 1); refined afterwards.
fn probit_acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let t = (-2.0 * p.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else if p <= 1.0 - P_LOW {
        let u = p - 0.5;
        let t = u * u;
        (((((A[0] * t + A[1]) * t + A[2]) * t + A[3]) * t + A[4]) * t + A[5]) * u
            / (((((B[0] * t + B[1]) * t + B[2]) * t + B[3]) * t + B[4]) * t + 1.0)
    } else {
        let t = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    }
}

pub(crate) fn q_inv_raw(p: f64) -> f64 {
    let mut x = -probit_acklam(p);
    // Two Halley steps on f(x) = Q(x) - p. Skipped deep in the tail where
    // exp(x^2/2) would overflow; Acklam alone is ~1e-9 relative there.
    if x.abs() < 35.0 {
        for _ in 0..2 {
            let r = (q_raw(x) - p) * SQRT_2PI * (0.5 * x * x).exp();
            x += r / (1.0 - 0.5 * x * r);
        }
    }
    x
}

/// Inverse of `q` on (0, 1). The boundary values have no finite preimage;
/// callers must handle saturated counts before inverting.
pub fn q_inv(p: Prob) -> Result<f64> {
    let v = p.value();
    if v <= 0.0 || v >= 1.0 {
        return Err(Error::Domain(format!(
            "q_inv: probability {v} must lie strictly inside (0, 1)"
        )));
    }
    Ok(q_inv_raw(v))
}

#[inline]
pub(crate) fn bvn_pdf_raw(y1: f64, y2: f64, r: f64) -> f64 {
    let s = 1.0 - r * r;
    (-(y1 * y1 - 2.0 * r * y1 * y2 + y2 * y2) / (2.0 * s)).exp() / (2.0 * PI * s.sqrt())
}

/// Bivariate standard normal density with correlation `rho`.
pub fn bvn_pdf(y1: f64, y2: f64, rho: Corr) -> f64 {
    bvn_pdf_raw(y1, y2, rho.value())
}

/// Derivative of the bivariate density with respect to the correlation,
/// evaluated at (w1, w2). Appears in the curvature of the pairwise
/// log-likelihood.
#[inline]
pub(crate) fn bvn_pdf_drho(w1: f64, w2: f64, r: f64) -> f64 {
    let s = 1.0 - r * r;
    let u = w1 * w1 + w2 * w2 - 2.0 * r * w1 * w2;
    bvn_pdf_raw(w1, w2, r) * ((r + w1 * w2) / s - r * u / (s * s))
}

// Gauss-Legendre half-rules used by the orthant quadrature, as published
// with the Drezner-Wesolowsky-Genz algorithm: (weight, abscissa) pairs for
// n = 6, 12 and 20 points on (-1, 1).
const GL6: [(f64, f64); 3] = [
    (0.1713244923791704, 0.9324695142031521),
    (0.3607615730481386, 0.6612093864662645),
    (0.4679139345726910, 0.2386191860831969),
];
const GL12: [(f64, f64); 6] = [
    (0.04717533638651183, 0.9815606342467192),
    (0.1069393259953184, 0.9041172563704749),
    (0.1600783285433462, 0.7699026741943047),
    (0.2031674267230659, 0.5873179542866175),
    (0.2334925365383548, 0.3678314989981802),
    (0.2491470458134028, 0.1252334085114689),
];
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, 0.9931285991850949),
    (0.04060142980038694, 0.9639719272779138),
    (0.06267204833410907, 0.9122344282513259),
    (0.08327674157670475, 0.8391169718222188),
    (0.1019301198172404, 0.7463319064601508),
    (0.1181945319615184, 0.6360536807265150),
    (0.1316886384491766, 0.5108670019508271),
    (0.1420961093183820, 0.3737060887154195),
    (0.1491729864726037, 0.2277858511416451),
    (0.1527533871307258, 0.07652652113349734),
];

/// Upper orthant probability Pr{Y1 > h, Y2 > k} for a standard bivariate
/// normal with correlation `r`, where `|r| <= 1` (the degenerate values take
/// the closed-form limits). Drezner-Wesolowsky as refined by Genz.
pub(crate) fn bvn_orthant_raw(dh: f64, dk: f64, r: f64) -> f64 {
    if r >= 1.0 {
        // Y1 = Y2: the joint tail is the tail of the larger threshold.
        return q_raw(dh.max(dk));
    }
    if r <= -1.0 {
        // Y2 = -Y1: Pr{dh < Y < -dk}.
        return (phid(-dk) - phid(dh)).max(0.0);
    }
    if r == 0.0 {
        return q_raw(dh) * q_raw(dk);
    }

    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };

    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = 0.5 * r.asin();
        for &(w, x) in quad {
            for is in [-1.0_f64, 1.0] {
                let sn = (asr * (is * x + 1.0)).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * PI) + q_raw(h) * q_raw(k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let mut asr = -0.5 * (bs / a_s + hk);
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = bs.sqrt();
            bvn -= (-0.5 * hk).exp()
                * SQRT_2PI
                * phid(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(w, x) in quad {
            for is in [-1.0_f64, 1.0] {
                let xs = (a * (is * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                asr = -0.5 * (bs / xs + hk);
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn /= -(2.0 * PI);
        if r > 0.0 {
            bvn += phid(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                bvn += phid(k) - phid(h);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Upper orthant probability Pr{Y1 > k1, Y2 > k2} of the standard bivariate
/// normal with correlation `rho`.
pub fn bvn_orthant(k1: f64, k2: f64, rho: Corr) -> Prob {
    Prob::new_unchecked(bvn_orthant_raw(k1, k2, rho.value()))
}

/// Physicists' Hermite polynomial H_k(a): H_0 = 1, H_1 = 2a,
/// H_{k+1} = 2a H_k - 2k H_{k-1}.
pub fn hermite(k: usize, a: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0 * a,
        _ => {
            let mut h0 = 1.0;
            let mut h1 = 2.0 * a;
            for m in 1..k {
                let h2 = 2.0 * a * h1 - 2.0 * (m as f64) * h0;
                h0 = h1;
                h1 = h2;
            }
            h1
        }
    }
}

#[inline]
pub(crate) fn g_kernel_raw(k1: f64, k2: f64, r: f64) -> f64 {
    let s = (1.0 - r * r).sqrt();
    k1 * phi(k1) * q_raw((k2 - r * k1) / s) - r * bvn_pdf_raw(k1, k2, r)
}

/// Kernel of the orthant-probability derivative with respect to a scale:
/// sigma1 * d/dsigma1 Pr{Y1 > v/sigma1, Y2 > v/sigma2} = g(v/sigma1, v/sigma2, rho).
///
/// g(k1, k2, r) = k1 phi(k1) Q((k2 - r k1)/sqrt(1 - r^2)) - r f(k1, k2 | r),
/// and satisfies g(k1, k2, r) = -g(-k1, k2, -r).
pub fn g_fn(k1: f64, k2: f64, rho: Corr) -> f64 {
    g_kernel_raw(k1, k2, rho.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn q_at_zero_is_half() {
        assert_eq!(q(0.0).unwrap().value(), 0.5);
    }

    #[test]
    fn q_deep_tail_underflows_cleanly() {
        let p = q(40.0).unwrap().value();
        assert!(p < 1e-300);
        assert!(p >= 0.0);
    }

    #[test]
    fn q_matches_quadrature_reference() {
        // Reference value from 30-digit quadrature of the normal density.
        assert_relative_eq!(q(2.0).unwrap().value(), 0.0227501319481792072, max_relative = 1e-14);
    }

    #[test]
    fn q_inv_median_and_round_trip() {
        assert_abs_diff_eq!(q_inv(Prob::new(0.5).unwrap()).unwrap(), 0.0, epsilon = 1e-15);
        let p = q(1.234).unwrap();
        assert_abs_diff_eq!(q_inv(p).unwrap(), 1.234, epsilon = 1e-10);
        assert_abs_diff_eq!(
            q_inv(Prob::new(0.02275013).unwrap()).unwrap(),
            2.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn q_inv_rejects_boundary() {
        assert!(q_inv(Prob::new(0.0).unwrap()).is_err());
        assert!(q_inv(Prob::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn pdf_values() {
        let r0 = Corr::new(0.0).unwrap();
        assert_relative_eq!(bvn_pdf(0.0, 0.0, r0), 1.0 / (2.0 * PI), max_relative = 1e-15);
        assert_relative_eq!(
            bvn_pdf(1.0, -1.0, r0),
            (-1.0_f64).exp() / (2.0 * PI),
            max_relative = 1e-15
        );
        // 30-digit reference for a correlated point.
        assert_relative_eq!(
            bvn_pdf(0.5, 0.3, Corr::new(0.6).unwrap()),
            0.175567180387031479,
            max_relative = 1e-14
        );
    }

    #[test]
    fn corr_validation() {
        assert!(Corr::new(1.0).is_err());
        assert!(Corr::new(-1.2).is_err());
        assert!(Corr::new(0.9999999).is_ok());
        assert_eq!(Corr::clamped(5.0).value(), 1.0 - CORR_CLAMP);
    }

    #[test]
    fn orthant_independent_and_zero_threshold() {
        assert_relative_eq!(
            bvn_orthant(0.0, 0.0, Corr::new(0.0).unwrap()).value(),
            0.25,
            max_relative = 1e-15
        );
        // Classical identity 1/4 + asin(rho)/(2 pi).
        for rho in [-0.8, -0.3, 0.2, 0.5, 0.9] {
            let got = bvn_orthant(0.0, 0.0, Corr::new(rho).unwrap()).value();
            let want = 0.25 + rho.asin() / (2.0 * PI);
            assert_abs_diff_eq!(got, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn orthant_reference_values() {
        // 30-digit quadrature references.
        assert_abs_diff_eq!(
            bvn_orthant(0.8, -0.2, Corr::new(0.6).unwrap()).value(),
            0.187765208805669032,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            bvn_orthant(1.0, 1.0, Corr::new(0.93).unwrap()).value(),
            0.122538443067552401,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            bvn_orthant(-1.5, 0.5, Corr::new(-0.97).unwrap()).value(),
            0.241730630343941692,
            epsilon = 1e-13
        );
        // At rho = 0.999 the second constraint is implied by the first to
        // within 1e-22, so the value collapses onto Q(2).
        assert_abs_diff_eq!(
            bvn_orthant(2.0, -2.0, Corr::new(0.999).unwrap()).value(),
            0.0227501319481792072,
            epsilon = 1e-13
        );
    }

    #[test]
    fn orthant_factorises_at_zero_correlation() {
        let r0 = Corr::new(0.0).unwrap();
        for (k1, k2) in [(0.3, -1.1), (2.0, 0.7), (-0.4, -0.9)] {
            assert_relative_eq!(
                bvn_orthant(k1, k2, r0).value(),
                q_raw(k1) * q_raw(k2),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn orthant_degenerate_limits() {
        assert_relative_eq!(bvn_orthant_raw(0.3, 1.1, 1.0), q_raw(1.1), max_relative = 1e-15);
        assert_relative_eq!(
            bvn_orthant_raw(-0.5, -0.7, -1.0),
            phid(0.7) - phid(-0.5),
            max_relative = 1e-15
        );
        assert_eq!(bvn_orthant_raw(1.0, -0.5, -1.0), 0.0);
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 3.7), 1.0);
        assert_eq!(hermite(1, 1.5), 3.0);
        assert_eq!(hermite(2, 1.0), 2.0);
        // H_5(x) = 32x^5 - 160x^3 + 120x, exact at 0.8 by Rodrigues
        // differentiation.
        assert_relative_eq!(hermite(5, 0.8), 24.56576, max_relative = 1e-13);
    }

    #[test]
    fn g_fn_limits_and_reference() {
        let rho = Corr::new(0.5).unwrap();
        // k1 = 0 kills the first term.
        assert_relative_eq!(
            g_fn(0.0, 0.7, rho),
            -0.5 * bvn_pdf(0.0, 0.7, rho),
            max_relative = 1e-14
        );
        // rho = 0 kills the second term.
        let r0 = Corr::new(0.0).unwrap();
        assert_relative_eq!(
            g_fn(1.3, 0.4, r0),
            1.3 * phi(1.3) * q_raw(0.4),
            max_relative = 1e-14
        );
        // 30-digit reference.
        assert_relative_eq!(g_fn(1.2, 0.7, rho), 0.0613714390523431222, max_relative = 1e-13);
    }
}
