//! Closed-form error prediction.
//!
//! For the constant-threshold estimator the variance of
//! `sigma_hat = h(p_hat)` with `h(a) = v / Q^{-1}(a)` follows from a
//! second-order Taylor expansion around the true tail probability,
//!
//! ```text
//! V(sigma_hat) = (h' - h'' p)^2 V(p_hat) + (1/4) h''^2 V(p_hat^2)
//!              + (h' - h'' p) h'' C(p_hat, p_hat^2),
//! ```
//!
//! with the moments of the binomial proportion supplied exactly through
//! Stirling numbers of the second kind. The covariance estimate is handled
//! to first order: `V(sigma12_hat) = l R l^T`, where `l` collects the
//! partial derivatives of the implicit solve and `R` is the exact
//! covariance of `(p1_hat, p2_hat, p12_hat)`.
//!
//! For the time-varying MLE the predictor is the inverse of the Fisher
//! information matrix, accumulated per sample over the four sign patterns.

use crate::error::{Error, Result};
use crate::gauss::{bvn_pdf_raw, g_kernel_raw, q_inv_raw, q_raw, Prob, SQRT_2PI};
use crate::quantizer::{PairParams, ScheduleKind, ThresholdSchedule};
use crate::recovery::likelihood::{outcome_prob, sample_gradient, OUTCOMES};
use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Condition number beyond which the information matrix is reported as
/// rank deficient instead of inverted.
const COND_LIMIT: f64 = 1e12;

/// First and second derivative of `h(a) = v / Q^{-1}(a)` at a tail
/// probability.
#[derive(Debug, Clone, Copy)]
pub struct TaylorCoeffs {
    pub h_prime: f64,
    pub h_double_prime: f64,
    pub at: Prob,
}

/// The map inverted by the scale estimator, `h(a) = v / Q^{-1}(a)`.
/// Exposed for derivative cross-checks.
pub fn h_fn(a: f64, v: f64) -> f64 {
    v / q_inv_raw(a)
}

/// Derivatives of `h` evaluated at `p = Q(v / sigma)`:
/// `h' = sqrt(2 pi) sigma^2 / v * exp(v^2 / (2 sigma^2))`,
/// `h'' = exp(v^2 / sigma^2) (4 pi sigma^3 / v^2 - 2 pi sigma)`.
pub fn taylor_coeffs(sigma: f64, v: f64) -> Result<TaylorCoeffs> {
    if v == 0.0 {
        return Err(Error::Unidentifiable(
            "zero threshold: the scale estimator has no finite variance".into(),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma = {sigma} must be positive")));
    }
    let s2 = sigma * sigma;
    let r2 = v * v / s2;
    let h_prime = SQRT_2PI * s2 / v * (0.5 * r2).exp();
    let h_double_prime = r2.exp()
        * (4.0 * std::f64::consts::PI * s2 * sigma / (v * v)
            - 2.0 * std::f64::consts::PI * sigma);
    Ok(TaylorCoeffs {
        h_prime,
        h_double_prime,
        at: Prob::new_unchecked(q_raw(v / sigma)),
    })
}

/// Stirling number of the second kind S(c, k) as a float.
pub fn stirling2(c: usize, k: usize) -> f64 {
    if k == 0 {
        return if c == 0 { 1.0 } else { 0.0 };
    }
    if k > c {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut fact_jm1 = 1.0; // (j-1)!
    for j in 1..=k {
        if j > 1 {
            fact_jm1 *= (j - 1) as f64;
        }
        let mut fact_kmj = 1.0; // (k-j)!
        for i in 2..=(k - j) {
            fact_kmj *= i as f64;
        }
        let sign = if (k - j) % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (j as f64).powi(c as i32 - 1) / (fact_jm1 * fact_kmj);
    }
    sum
}

/// Raw moment E[p_hat^c] of a binomial proportion with success probability
/// `p` over `n` trials: sum_k S(c, k) n^(falling k) p^k / n^c.
pub fn binomial_proportion_moment(p: f64, n: u64, c: usize) -> f64 {
    if c == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut falling = 1.0;
    for k in 1..=c {
        falling *= nf - (k as f64 - 1.0);
        sum += stirling2(c, k) * falling * p.powi(k as i32);
    }
    sum / nf.powi(c as i32)
}

/// Second to fourth moments of a binomial proportion.
#[derive(Debug, Clone, Copy)]
pub struct MomentSet {
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

pub fn binomial_moments(p: Prob, n: u64) -> MomentSet {
    let p = p.value();
    MomentSet {
        m2: binomial_proportion_moment(p, n, 2),
        m3: binomial_proportion_moment(p, n, 3),
        m4: binomial_proportion_moment(p, n, 4),
    }
}

/// Predicted variance of the constant-threshold scale estimate, full
/// second-order expansion.
pub fn taylor_var_sigma(sigma: f64, v: f64, n: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Dimension("need n >= 2".into()));
    }
    let coeffs = taylor_coeffs(sigma, v)?;
    let p = coeffs.at.value();
    let m = binomial_moments(coeffs.at, n);
    let var_p = m.m2 - p * p;
    let var_p2 = m.m4 - m.m2 * m.m2;
    let cov_p_p2 = m.m3 - p * m.m2;
    let a = coeffs.h_prime - coeffs.h_double_prime * p;
    let b = coeffs.h_double_prime;
    Ok((a * a * var_p + 0.25 * b * b * var_p2 + a * b * cov_p_p2).max(0.0))
}

/// First-order-only variant (drops the `V(p_hat^2)` and cross terms),
/// provided for comparison.
pub fn taylor_var_sigma_first_order(sigma: f64, v: f64, n: u64) -> Result<f64> {
    let coeffs = taylor_coeffs(sigma, v)?;
    let p = coeffs.at.value();
    Ok(coeffs.h_prime * coeffs.h_prime * p * (1.0 - p) / n as f64)
}

/// Where a prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheorySource {
    Taylor,
    Fim,
}

/// Predicted mean squared errors for the three parameters of a pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub source: TheorySource,
    pub mse_sigma1: Option<f64>,
    pub mse_sigma2: Option<f64>,
    pub mse_sigma12: Option<f64>,
    /// Fisher information matrix (row major) when `source == Fim`.
    pub fim: Option<[[f64; 3]; 3]>,
    /// Sensitivity vector of the first-order covariance expansion when
    /// `source == Taylor`.
    pub l_vector: Option<[f64; 3]>,
    /// Covariance of (p1_hat, p2_hat, p12_hat) when `source == Taylor`.
    pub r_matrix: Option<[[f64; 3]; 3]>,
    /// Set when the information matrix was too ill-conditioned to invert;
    /// the MSE fields are absent in that case.
    pub rank_deficient: bool,
}

/// Covariance matrix of (p1_hat, p2_hat, p12_hat): diagonal entries are
/// binomial variances, the cross terms are p12 (1 - p_i) / n and
/// (p12 - p1 p2) / n.
pub fn probability_covariance(p1: f64, p2: f64, p12: f64, n: u64) -> Matrix3<f64> {
    let nf = n as f64;
    Matrix3::new(
        p1 * (1.0 - p1) / nf,
        (p12 - p1 * p2) / nf,
        p12 * (1.0 - p1) / nf,
        (p12 - p1 * p2) / nf,
        p2 * (1.0 - p2) / nf,
        p12 * (1.0 - p2) / nf,
        p12 * (1.0 - p1) / nf,
        p12 * (1.0 - p2) / nf,
        p12 * (1.0 - p12) / nf,
    )
}

/// First-order variance of the constant-threshold covariance estimate,
/// `V(sigma12_hat) = l R l^T`.
pub fn taylor_var_sigma12(params: &PairParams, v: f64, n: u64) -> Result<TheoryReport> {
    if v == 0.0 {
        return Err(Error::Unidentifiable("zero threshold".into()));
    }
    let s1 = params.sigma1();
    let s2 = params.sigma2();
    let rho = params.rho();
    let w1 = v / s1;
    let w2 = v / s2;
    let p1 = q_raw(w1);
    let p2 = q_raw(w2);
    let p12 = crate::gauss::bvn_orthant_raw(w1, w2, rho);

    // d p12 / d sigma12 = f(w1, w2 | rho) / (s1 s2), inverted for the
    // implicit solve; d p12 / d sigma_i = g(w_i, w_j, rho) / sigma_i.
    let f = bvn_pdf_raw(w1, w2, rho);
    if f == 0.0 {
        return Err(Error::IllPosed(
            "joint density vanishes at the thresholds; no first-order sensitivity".into(),
        ));
    }
    let dsig12_dp12 = s1 * s2 / f;
    let dp12_ds1 = g_kernel_raw(w1, w2, rho) / s1;
    let dp12_ds2 = g_kernel_raw(w2, w1, rho) / s2;
    let h1 = taylor_coeffs(s1, v)?.h_prime;
    let h2 = taylor_coeffs(s2, v)?.h_prime;
    let l = [
        -dsig12_dp12 * dp12_ds1 * h1,
        -dsig12_dp12 * dp12_ds2 * h2,
        dsig12_dp12,
    ];
    let r = probability_covariance(p1, p2, p12, n);
    let lv = nalgebra::Vector3::from_column_slice(&l);
    let var = (lv.transpose() * r * lv)[(0, 0)].max(0.0);
    Ok(TheoryReport {
        source: TheorySource::Taylor,
        mse_sigma1: Some(taylor_var_sigma(s1, v, n)?),
        mse_sigma2: Some(taylor_var_sigma(s2, v, n)?),
        mse_sigma12: Some(var),
        fim: None,
        l_vector: Some(l),
        r_matrix: Some([
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]),
        rank_deficient: false,
    })
}

/// Fisher information matrix of theta = (sigma1, sigma2, sigma12) for a
/// deterministic schedule: the per-sample expectation of the score outer
/// product, summed over samples and the four sign patterns.
pub fn fim(params: &PairParams, schedule: &ThresholdSchedule) -> Result<Matrix3<f64>> {
    if !schedule.is_deterministic() {
        return Err(Error::Usage(
            "information matrix needs exact threshold values; dither has none".into(),
        ));
    }
    let theta = params.theta();
    // Group equal thresholds: the information is additive over samples.
    let mut groups: Vec<(f64, f64)> = Vec::new();
    for t in 0..schedule.len() {
        let v = schedule.value(t).expect("deterministic");
        match groups.iter_mut().find(|(lv, _)| *lv == v) {
            Some((_, c)) => *c += 1.0,
            None => groups.push((v, 1.0)),
        }
    }
    let mut f = Matrix3::zeros();
    for (v, count) in groups {
        for &(x1, x2) in OUTCOMES.iter() {
            let o = outcome_prob(theta, v, v, x1, x2);
            if o <= 0.0 {
                continue;
            }
            let s = sample_gradient(theta, v, v, x1, x2);
            for i in 0..3 {
                for j in 0..3 {
                    f[(i, j)] += count * o * s[i] * s[j];
                }
            }
        }
    }
    Ok(f)
}

/// Invert the information matrix with a condition check.
fn invert_fim(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*f);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(min > 0.0) || max / min > COND_LIMIT {
        return Err(Error::RankDeficient(format!(
            "eigenvalues range from {min:e} to {max:e}"
        )));
    }
    f.try_inverse()
        .ok_or_else(|| Error::RankDeficient("inversion failed".into()))
}

/// Prediction dispatch:
/// * constant schedules use the Taylor expansion;
/// * deterministic time-varying schedules use the inverse information
///   matrix;
/// * dithered schedules are predicted as a constant threshold acting on the
///   shifted covariance (variances increased by the dither variance).
pub fn predict_mse(params: &PairParams, schedule: &ThresholdSchedule) -> Result<TheoryReport> {
    match schedule.kind() {
        ScheduleKind::Constant { level } => {
            taylor_var_sigma12(params, *level, schedule.len() as u64)
        }
        ScheduleKind::GaussianDither { level, std } => {
            let var = std * std;
            let shifted = PairParams::new(
                (params.sigma1() * params.sigma1() + var).sqrt(),
                (params.sigma2() * params.sigma2() + var).sqrt(),
                params.sigma12(),
            )?;
            taylor_var_sigma12(&shifted, *level, schedule.len() as u64)
        }
        ScheduleKind::Zero => Err(Error::Unidentifiable(
            "zero threshold: scales are not estimable".into(),
        )),
        _ => {
            let f = fim(params, schedule)?;
            let fim_rows = [
                [f[(0, 0)], f[(0, 1)], f[(0, 2)]],
                [f[(1, 0)], f[(1, 1)], f[(1, 2)]],
                [f[(2, 0)], f[(2, 1)], f[(2, 2)]],
            ];
            match invert_fim(&f) {
                Ok(q) => Ok(TheoryReport {
                    source: TheorySource::Fim,
                    mse_sigma1: Some(q[(0, 0)]),
                    mse_sigma2: Some(q[(1, 1)]),
                    mse_sigma12: Some(q[(2, 2)]),
                    fim: Some(fim_rows),
                    l_vector: None,
                    r_matrix: None,
                    rank_deficient: false,
                }),
                Err(Error::RankDeficient(_)) => Ok(TheoryReport {
                    source: TheorySource::Fim,
                    mse_sigma1: None,
                    mse_sigma2: None,
                    mse_sigma12: None,
                    fim: Some(fim_rows),
                    l_vector: None,
                    r_matrix: None,
                    rank_deficient: true,
                }),
                Err(e) => Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn h_prime_direct_substitution() {
        // At sigma = 1, v = 1: h' = sqrt(2 pi) e^{1/2}.
        let c = taylor_coeffs(1.0, 1.0).unwrap();
        assert_relative_eq!(c.h_prime, SQRT_2PI * 0.5f64.exp(), max_relative = 1e-14);
    }

    #[test]
    fn h_derivatives_match_finite_differences() {
        let (sigma, v) = (0.7, 0.5);
        let c = taylor_coeffs(sigma, v).unwrap();
        let p = c.at.value();
        let h = 1e-6;
        let fd1 = (h_fn(p + h, v) - h_fn(p - h, v)) / (2.0 * h);
        let fd2 = (h_fn(p + h, v) - 2.0 * h_fn(p, v) + h_fn(p - h, v)) / (h * h);
        assert_relative_eq!(c.h_prime, fd1, max_relative = 1e-6);
        assert_relative_eq!(c.h_double_prime, fd2, max_relative = 1e-4);
    }

    #[test]
    fn stirling_and_moment_small_cases() {
        // E[(n p_hat)^2] at n = 2, p = 1/2 equals 1.5 by enumeration of
        // {0, 1, 2}.
        let m2 = binomial_proportion_moment(0.5, 2, 2);
        assert_relative_eq!(m2 * 4.0, 1.5, max_relative = 1e-14);
        assert_eq!(binomial_proportion_moment(0.0, 10, 3), 0.0);
        assert_eq!(binomial_proportion_moment(1.0, 10, 4), 1.0);
    }

    #[test]
    fn moments_match_brute_force_enumeration() {
        // Exhaustive pmf summation over the 11-point binomial.
        let (p, n) = (0.3f64, 10u64);
        for c in 1..=4usize {
            let mut brute = 0.0;
            let mut pmf = Vec::new();
            for k in 0..=n {
                let mut logp = 0.0;
                for i in 0..k {
                    logp += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
                }
                logp += k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln();
                pmf.push(logp.exp());
            }
            for (k, w) in pmf.iter().enumerate() {
                brute += w * (k as f64 / n as f64).powi(c as i32);
            }
            assert_abs_diff_eq!(binomial_proportion_moment(p, n, c), brute, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_threshold_variance_is_unidentifiable() {
        assert!(matches!(
            taylor_var_sigma(0.5, 0.0, 1000),
            Err(Error::Unidentifiable(_))
        ));
    }

    #[test]
    fn r_matrix_cross_term_vanishes_at_independence() {
        let p1 = q_raw(0.5 / 0.25);
        let p2 = q_raw(0.5 / 0.6);
        let r = probability_covariance(p1, p2, p1 * p2, 1000);
        assert_abs_diff_eq!(r[(0, 1)], 0.0, epsilon = 1e-18);
    }

    #[test]
    fn sigma12_sensitivity_matches_finite_differences() {
        // d p12 / d sigma12 = f(v/s1, v/s2 | rho) / (s1 s2).
        let params = PairParams::new(0.25, 0.6, -0.08).unwrap();
        let v = 0.3;
        let (s1, s2) = (params.sigma1(), params.sigma2());
        let h = 1e-6;
        let p12 = |s12: f64| {
            crate::gauss::bvn_orthant_raw(v / s1, v / s2, crate::quantizer::clamp_rho(s12 / (s1 * s2)))
        };
        let fd = (p12(params.sigma12() + h) - p12(params.sigma12() - h)) / (2.0 * h);
        let analytic = bvn_pdf_raw(v / s1, v / s2, params.rho()) / (s1 * s2);
        assert_relative_eq!(analytic, fd, max_relative = 1e-6);
    }

    #[test]
    fn fim_zero_threshold_rank_deficiency() {
        // Independent channels at zero threshold: no information about the
        // scales, some about the covariance.
        let params = PairParams::new(0.5, 0.8, 0.0).unwrap();
        let sched = ThresholdSchedule::zero(2, 100).unwrap();
        let f = fim(&params, &sched).unwrap();
        assert_abs_diff_eq!(f[(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f[(1, 1)], 0.0, epsilon = 1e-14);
        assert!(f[(2, 2)] > 0.0);
        let report = predict_mse(&params, &sched);
        assert!(report.is_err()); // zero schedule rejected by dispatch

        // With correlation the matrix is nonzero but still singular.
        let params = PairParams::from_rho(0.5, 0.8, 0.5).unwrap();
        let sched = ThresholdSchedule::staircase(vec![0.0, 0.0], 2, 100).unwrap();
        let report = predict_mse(&params, &sched).unwrap();
        assert!(report.rank_deficient);
        assert!(report.mse_sigma1.is_none());
    }

    #[test]
    fn fim_scales_linearly_with_samples() {
        let params = PairParams::from_rho(0.8, 0.9, 0.25 / (0.8 * 0.9)).unwrap();
        let s1 = ThresholdSchedule::constant(0.5, 2, 100).unwrap();
        let s2 = ThresholdSchedule::constant(0.5, 2, 400).unwrap();
        let f1 = fim(&params, &s1).unwrap();
        let f2 = fim(&params, &s2).unwrap();
        assert_relative_eq!(f2[(0, 0)], 4.0 * f1[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(f2[(2, 2)], 4.0 * f1[(2, 2)], max_relative = 1e-12);
    }

    #[test]
    fn dispatch_identities() {
        let params = PairParams::new(0.25, 0.6, -0.08).unwrap();
        let n = 1000;
        // Constant dispatch equals the Taylor functions exactly.
        let sched = ThresholdSchedule::constant(0.5, 2, n).unwrap();
        let rep = predict_mse(&params, &sched).unwrap();
        assert_eq!(rep.source, TheorySource::Taylor);
        assert_eq!(
            rep.mse_sigma1.unwrap(),
            taylor_var_sigma(0.25, 0.5, n as u64).unwrap()
        );
        // Dither dispatch equals the constant prediction at the shifted
        // parameters.
        let var = 0.15f64;
        let dither = ThresholdSchedule::gaussian_dither(0.5, var.sqrt(), 2, n).unwrap();
        let rep_d = predict_mse(&params, &dither).unwrap();
        let shifted = PairParams::new(
            (0.25f64 * 0.25 + var).sqrt(),
            (0.6f64 * 0.6 + var).sqrt(),
            -0.08,
        )
        .unwrap();
        let rep_s = taylor_var_sigma12(&shifted, 0.5, n as u64).unwrap();
        assert_eq!(rep_d.mse_sigma1.unwrap(), rep_s.mse_sigma1.unwrap());
        assert_eq!(rep_d.mse_sigma12.unwrap(), rep_s.mse_sigma12.unwrap());
    }

    #[test]
    fn fim_prediction_decays_like_one_over_n() {
        let params = PairParams::new(0.8, 0.9, 0.25).unwrap();
        let levels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
        let mut mses = Vec::new();
        for &n in &[100usize, 1000, 10_000] {
            let sched = ThresholdSchedule::staircase(levels.clone(), 2, n).unwrap();
            let rep = predict_mse(&params, &sched).unwrap();
            mses.push(rep.mse_sigma1.unwrap());
        }
        let slope = (mses[2].ln() - mses[0].ln()) / ((10_000f64).ln() - (100f64).ln());
        assert_abs_diff_eq!(slope, -1.0, epsilon = 0.05);
    }
}
