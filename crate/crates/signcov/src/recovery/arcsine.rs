//! Arcsine-law estimators for zero-threshold batches.
//!
//! With a zero threshold the sign covariance determines only the
//! correlation matrix: `Sigma_x = (2/pi) asin(C)`, inverted as
//! `C_hat = sin(pi/2 * Sigma_x_hat)`. The complex variant applies the
//! `pi/4` scaling separately to the real and imaginary parts of the sign
//! covariance.

use crate::error::{Error, Result};
use crate::quantizer::OneBitBatch;
use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

fn require_zero_schedule(batch: &OneBitBatch) -> Result<()> {
    if !batch.schedule().is_zero() {
        return Err(Error::Usage(
            "arcsine estimator requires a zero-threshold batch".into(),
        ));
    }
    Ok(())
}

/// Sign second-moment matrix accumulated in integers (exact).
fn sign_covariance(batch: &OneBitBatch) -> DMatrix<f64> {
    let m = batch.channels();
    let n = batch.len();
    let mut acc = vec![0i64; m * m];
    for t in 0..n {
        for i in 0..m {
            let xi = batch.sign(i, t) as i64;
            for j in i..m {
                acc[i * m + j] += xi * batch.sign(j, t) as i64;
            }
        }
    }
    let mut s = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = acc[i * m + j] as f64 / n as f64;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Correlation-matrix estimate from a real zero-threshold batch. The
/// output is symmetric with unit diagonal.
pub fn arcsine_real(batch: &OneBitBatch) -> Result<DMatrix<f64>> {
    require_zero_schedule(batch)?;
    let mut s = sign_covariance(batch);
    s.apply(|e| *e = (FRAC_PI_2 * *e).sin());
    Ok(s)
}

/// Correlation-matrix estimate from a complex zero-threshold batch
/// (rows 0..M real parts, rows M..2M imaginary parts).
pub fn arcsine_complex(batch: &OneBitBatch) -> Result<DMatrix<Complex64>> {
    require_zero_schedule(batch)?;
    let m = batch
        .complex_channels()
        .ok_or_else(|| Error::Usage("arcsine_complex needs a complex batch".into()))?;
    let s = sign_covariance(batch);
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            // E[x_i conj(x_j)] from the stacked real second moments.
            let re = s[(i, j)] + s[(m + i, m + j)];
            let im = s[(m + i, j)] - s[(i, m + j)];
            out[(i, j)] = Complex64::new((FRAC_PI_4 * re).sin(), (FRAC_PI_4 * im).sin());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{
        quantize_complex, quantize_real, sample_complex_gaussian, sample_pair, PairParams,
        ThresholdSchedule,
    };
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn rejects_nonzero_schedule() {
        let p = PairParams::new(1.0, 1.0, 0.0).unwrap();
        let y = sample_pair(&p, 16, 0);
        let sched = ThresholdSchedule::constant(0.5, 2, 16).unwrap();
        let batch = quantize_real(&y, &sched, 0).unwrap();
        assert!(arcsine_real(&batch).is_err());
    }

    #[test]
    fn perfectly_matched_channels() {
        let n = 256;
        let cov = DMatrix::from_row_slice(1, 1, &[1.0]);
        let y1 = crate::quantizer::sample_gaussian(&cov, n, 4).unwrap();
        let mut y = DMatrix::zeros(2, n);
        for t in 0..n {
            y[(0, t)] = y1[(0, t)];
            y[(1, t)] = y1[(0, t)];
        }
        let sched = ThresholdSchedule::zero(2, n).unwrap();
        let batch = quantize_real(&y, &sched, 4).unwrap();
        let c = arcsine_real(&batch).unwrap();
        assert_abs_diff_eq!(c[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn independent_channels_are_uncorrelated() {
        let n = 100_000;
        let p = PairParams::new(1.0, 1.0, 0.0).unwrap();
        let y = sample_pair(&p, n, 9);
        let sched = ThresholdSchedule::zero(2, n).unwrap();
        let batch = quantize_real(&y, &sched, 9).unwrap();
        let c = arcsine_real(&batch).unwrap();
        // Delta-method tolerance 3 (pi/2) / sqrt(n).
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 3.0 * FRAC_PI_2 / (n as f64).sqrt());
    }

    #[test]
    fn recovers_correlation_at_scale() {
        let n = 1_000_000;
        let p = PairParams::new(1.0, 1.0, 0.6).unwrap();
        let y = sample_pair(&p, n, 17);
        let sched = ThresholdSchedule::zero(2, n).unwrap();
        let batch = quantize_real(&y, &sched, 17).unwrap();
        let c = arcsine_real(&batch).unwrap();
        assert_abs_diff_eq!(c[(0, 1)], 0.6, epsilon = 5e-3);
    }

    #[test]
    fn complex_self_pair_diagonal_is_one() {
        let n = 4096;
        let cov = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        let y = sample_complex_gaussian(&cov, n, 5).unwrap();
        let sched = ThresholdSchedule::zero(2, n).unwrap();
        let batch = quantize_complex(&y, &sched, 5).unwrap();
        let c = arcsine_complex(&batch).unwrap();
        assert_abs_diff_eq!(c[(0, 0)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[(0, 0)].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn complex_recovers_modulus_and_phase() {
        let n = 1_000_000;
        let r = 0.5;
        let phase = std::f64::consts::FRAC_PI_4;
        let c12 = Complex64::from_polar(r, phase);
        let mut cov = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        cov[(0, 0)] = Complex64::new(1.0, 0.0);
        cov[(1, 1)] = Complex64::new(1.0, 0.0);
        cov[(0, 1)] = c12;
        cov[(1, 0)] = c12.conj();
        let y = sample_complex_gaussian(&cov, n, 23).unwrap();
        let sched = ThresholdSchedule::zero(4, n).unwrap();
        let batch = quantize_complex(&y, &sched, 23).unwrap();
        let c = arcsine_complex(&batch).unwrap();
        let got = c[(0, 1)];
        assert_abs_diff_eq!(got.norm(), r, epsilon = 0.01);
        assert_abs_diff_eq!(got.arg(), phase, epsilon = 2.0_f64.to_radians());
    }

    #[test]
    fn complex_independent_channels() {
        let n = 200_000;
        let mut cov = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        cov[(0, 0)] = Complex64::new(1.0, 0.0);
        cov[(1, 1)] = Complex64::new(1.0, 0.0);
        let y = sample_complex_gaussian(&cov, n, 29).unwrap();
        let sched = ThresholdSchedule::zero(4, n).unwrap();
        let batch = quantize_complex(&y, &sched, 29).unwrap();
        let c = arcsine_complex(&batch).unwrap();
        assert!(c[(0, 1)].norm() < 3.0 * FRAC_PI_2 / (n as f64).sqrt());
    }
}
