//! Covariance estimators: arcsine law, constant threshold, time-varying
//! threshold MLE, joint refinement, and pairwise assembly of full real and
//! complex covariance matrices.

pub mod arcsine;
pub mod constant;
pub mod likelihood;
pub mod newton;

pub use arcsine::{arcsine_complex, arcsine_real};
pub use constant::{const_pair, const_rho, const_sigma, dither_pair, RhoFit};
pub use likelihood::{ChannelCell, LikelihoodTerms, PairCell};
pub use newton::{joint_mle, mle_sigma12_newton, mle_sigma_newton, JointOptions, NewtonOptions};

use crate::error::{Error, Result};
use crate::gauss::{q_inv_raw, CORR_CLAMP};
use crate::quantizer::{clamp_rho, OneBitBatch, PairParams, ScheduleKind};
use likelihood::{channel_cells, pair_cells};
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Zero-threshold arcsine law (correlation matrix only).
    Arcsine,
    /// Closed-form constant-threshold estimator; on dithered batches the
    /// shifted covariance is estimated and the dither variance removed.
    Constant,
    /// Per-channel and pairwise Newton MLE under known time-varying
    /// thresholds.
    TimeVarying,
    /// As `TimeVarying`, followed by the joint gradient refinement.
    TimeVaryingJoint,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Arcsine => "arcsine",
            Method::Constant => "constant",
            Method::TimeVarying => "time_varying",
            Method::TimeVaryingJoint => "time_varying_joint",
        }
    }
}

/// Per-stage iteration counts of a pair recovery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageIterations {
    pub sigma1: usize,
    pub sigma2: usize,
    pub sigma12: usize,
    pub joint: usize,
}

/// Diagnostic flags of a pair recovery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFlags {
    /// sigma12 stage switched to bisection on the score.
    pub sigma12_bisection: bool,
    /// Joint refinement line search failed; the two-stage estimate was
    /// returned.
    pub line_search_failed: bool,
    /// Correlation solve fell back to inverting the orthant probability.
    pub orthant_fallback: bool,
    /// Diagonal corrected for the dither variance.
    pub dither_unshifted: bool,
}

/// Estimated parameters of one channel pair with solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub params: PairParams,
    pub method: Method,
    pub iterations: StageIterations,
    pub converged: bool,
    pub flags: PairFlags,
}

/// Options shared by the pair and matrix recovery entry points.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryOptions {
    pub method: Method,
    /// Truncation order of the correlation series in the constant-threshold
    /// estimator.
    pub series_order: usize,
    /// Project the assembled matrix onto the PSD cone (eigenvalue clipping).
    pub psd_projection: bool,
    pub newton: NewtonOptions,
    pub joint: JointOptions,
}

impl RecoveryOptions {
    pub fn new(method: Method) -> Self {
        RecoveryOptions {
            method,
            series_order: 20,
            psd_projection: false,
            newton: NewtonOptions::default(),
            joint: JointOptions::default(),
        }
    }
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions::new(Method::TimeVarying)
    }
}

/// Initial scale: closed-form inversion on the sub-interval whose positive
/// fraction is nearest 0.3 (a well-conditioned operating point). Falls
/// back to the largest threshold magnitude when every usable cell sits too
/// close to p = 1/2.
fn init_sigma(cells: &[ChannelCell], channel: usize) -> Result<f64> {
    let mut candidates: Vec<(f64, f64)> = Vec::new(); // (|p_hat - 0.3|, sigma0)
    let mut any_unsaturated = false;
    for c in cells {
        if c.v == 0.0 || c.total() == 0.0 {
            continue;
        }
        if c.plus == 0.0 || c.minus == 0.0 {
            continue;
        }
        any_unsaturated = true;
        let p_hat = c.plus / c.total();
        let x = q_inv_raw(p_hat);
        if x == 0.0 {
            continue;
        }
        let sigma0 = c.v / x;
        if sigma0.is_finite() && sigma0 > 0.0 && sigma0 < 1e6 {
            candidates.push(((p_hat - 0.3).abs(), sigma0));
        }
    }
    if let Some(&(_, sigma0)) = candidates
        .iter()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
    {
        return Ok(sigma0);
    }
    if any_unsaturated {
        // All usable fractions are on the wrong side of 1/2; start from the
        // threshold scale.
        let vmax = cells.iter().map(|c| c.v.abs()).fold(0.0, f64::max);
        return Ok(vmax.max(1e-3));
    }
    Err(Error::Unidentifiable(format!(
        "channel {channel}: every sub-interval is saturated"
    )))
}

/// Initial covariance: arcsine estimate on the sub-interval with the
/// smallest threshold magnitude, scaled by the estimated scales.
fn init_sigma12(cells: &[PairCell], sigma1: f64, sigma2: f64) -> f64 {
    let cell = cells
        .iter()
        .filter(|c| c.total() > 0.0)
        .min_by(|a, b| {
            let ka = a.v1.abs() + a.v2.abs();
            let kb = b.v1.abs() + b.v2.abs();
            ka.partial_cmp(&kb).unwrap()
        });
    let Some(cell) = cell else {
        return 0.0;
    };
    let n = cell.total();
    let e_x1x2 = (cell.counts[0] - cell.counts[1] - cell.counts[2] + cell.counts[3]) / n;
    let rho0 = clamp_rho((FRAC_PI_2 * e_x1x2).sin()) * 0.99;
    rho0 * sigma1 * sigma2
}

/// Maximum-likelihood scale of one channel of a time-varying batch.
pub fn recover_sigma(batch: &OneBitBatch, channel: usize, opts: &RecoveryOptions) -> Result<newton::ScalarFit> {
    let cells = channel_cells(batch, channel)?;
    if cells.iter().all(|c| c.v == 0.0) {
        return Err(Error::Unidentifiable(format!(
            "channel {channel}: all thresholds are zero"
        )));
    }
    let init = init_sigma(&cells, channel)?;
    mle_sigma_newton(&cells, init, &opts.newton).map_err(|e| match e {
        Error::Saturated { detail, .. } => Error::Saturated { channel, detail },
        other => other,
    })
}

/// Full recovery of one channel pair.
pub fn recover_pair(
    batch: &OneBitBatch,
    ch1: usize,
    ch2: usize,
    opts: &RecoveryOptions,
) -> Result<PairEstimate> {
    match (opts.method, batch.schedule().kind()) {
        (Method::Arcsine, _) => Err(Error::Usage(
            "arcsine recovers a correlation matrix; use recover_matrix".into(),
        )),
        (Method::Constant, ScheduleKind::GaussianDither { .. }) => {
            dither_pair(batch, ch1, ch2, opts.series_order)
        }
        (Method::Constant, _) => const_pair(batch, ch1, ch2, opts.series_order),
        (Method::TimeVarying | Method::TimeVaryingJoint, ScheduleKind::GaussianDither { .. }) => {
            // The dither realization is not recorded, so per-sample
            // likelihoods are unavailable; reduce to the shifted-covariance
            // constant-threshold estimator.
            dither_pair(batch, ch1, ch2, opts.series_order)
        }
        (Method::TimeVarying | Method::TimeVaryingJoint, _) => {
            let fit1 = recover_sigma(batch, ch1, opts)?;
            let fit2 = recover_sigma(batch, ch2, opts)?;
            let cells = pair_cells(batch, ch1, ch2)?;
            let init12 = init_sigma12(&cells, fit1.value, fit2.value);
            let fit12 =
                mle_sigma12_newton(&cells, fit1.value, fit2.value, init12, &opts.newton)?;
            let mut iterations = StageIterations {
                sigma1: fit1.iterations,
                sigma2: fit2.iterations,
                sigma12: fit12.iterations,
                joint: 0,
            };
            let mut flags = PairFlags {
                sigma12_bisection: fit12.used_bisection,
                ..PairFlags::default()
            };
            let mut theta = [fit1.value, fit2.value, fit12.value];
            let mut converged = fit1.converged && fit2.converged && fit12.converged;
            if opts.method == Method::TimeVaryingJoint {
                let joint = joint_mle(&cells, theta, &opts.joint);
                iterations.joint = joint.iterations;
                flags.line_search_failed = joint.line_search_failed;
                if !joint.line_search_failed {
                    theta = joint.theta;
                }
                converged = converged && (joint.converged || joint.line_search_failed);
            }
            let bound = theta[0] * theta[1] * (1.0 - CORR_CLAMP);
            Ok(PairEstimate {
                params: PairParams::new(theta[0], theta[1], theta[2].clamp(-bound, bound))?,
                method: opts.method,
                iterations,
                converged,
                flags,
            })
        }
    }
}

/// An assembled covariance (or correlation) matrix estimate.
#[derive(Debug, Clone)]
pub struct MatrixEstimate {
    pub matrix: DMatrix<f64>,
    pub method: Method,
    pub psd_projected: bool,
    /// Flags aggregated over all pairs.
    pub flags: PairFlags,
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..eig.eigenvalues.len() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] += lambda * v[i] * v[j];
            }
        }
    }
    out
}

/// Recover an M x M covariance matrix pairwise: diagonal entries from the
/// per-channel stage, off-diagonals from the pair stage. For the arcsine
/// method the output is the correlation matrix.
pub fn recover_matrix(batch: &OneBitBatch, opts: &RecoveryOptions) -> Result<MatrixEstimate> {
    let m = batch.channels();
    if m < 2 {
        return Err(Error::Dimension("need at least two channels".into()));
    }
    if opts.method == Method::Arcsine {
        let mut matrix = arcsine_real(batch)?;
        let psd = opts.psd_projection;
        if psd {
            matrix = psd_project(&matrix);
        }
        return Ok(MatrixEstimate {
            matrix,
            method: Method::Arcsine,
            psd_projected: psd,
            flags: PairFlags::default(),
        });
    }

    let mut matrix = DMatrix::zeros(m, m);
    let mut flags = PairFlags::default();
    let dithered = matches!(batch.schedule().kind(), ScheduleKind::GaussianDither { .. });
    let constant_path = opts.method == Method::Constant || dithered;

    if constant_path {
        for i in 0..m {
            for j in (i + 1)..m {
                let est = recover_pair(batch, i, j, opts)?;
                matrix[(i, i)] = est.params.sigma1() * est.params.sigma1();
                matrix[(j, j)] = est.params.sigma2() * est.params.sigma2();
                matrix[(i, j)] = est.params.sigma12();
                matrix[(j, i)] = est.params.sigma12();
                merge_flags(&mut flags, est.flags);
            }
        }
    } else {
        // Per-channel scales once, pairwise covariances with them fixed.
        let mut sigmas = vec![0.0; m];
        for (i, s) in sigmas.iter_mut().enumerate() {
            *s = recover_sigma(batch, i, opts)?.value;
        }
        for i in 0..m {
            matrix[(i, i)] = sigmas[i] * sigmas[i];
        }
        for i in 0..m {
            for j in (i + 1)..m {
                let cells = pair_cells(batch, i, j)?;
                let init12 = init_sigma12(&cells, sigmas[i], sigmas[j]);
                let fit12 =
                    mle_sigma12_newton(&cells, sigmas[i], sigmas[j], init12, &opts.newton)?;
                let mut s12 = fit12.value;
                flags.sigma12_bisection |= fit12.used_bisection;
                if opts.method == Method::TimeVaryingJoint {
                    let joint = joint_mle(&cells, [sigmas[i], sigmas[j], s12], &opts.joint);
                    flags.line_search_failed |= joint.line_search_failed;
                    if !joint.line_search_failed {
                        s12 = joint.theta[2];
                    }
                }
                matrix[(i, j)] = s12;
                matrix[(j, i)] = s12;
            }
        }
    }

    let psd = opts.psd_projection;
    if psd {
        matrix = psd_project(&matrix);
    }
    Ok(MatrixEstimate {
        matrix,
        method: opts.method,
        psd_projected: psd,
        flags,
    })
}

fn merge_flags(acc: &mut PairFlags, f: PairFlags) {
    acc.sigma12_bisection |= f.sigma12_bisection;
    acc.line_search_failed |= f.line_search_failed;
    acc.orthant_fallback |= f.orthant_fallback;
    acc.dither_unshifted |= f.dither_unshifted;
}

/// A recovered complex covariance matrix.
#[derive(Debug, Clone)]
pub struct ComplexMatrixEstimate {
    pub matrix: DMatrix<Complex64>,
    pub method: Method,
    /// Always true: the fold is averaged with its conjugate transpose.
    pub hermitized: bool,
    pub psd_projected: bool,
    pub flags: PairFlags,
}

/// Recover the covariance of a complex batch through the widely linear
/// (stacked real/imaginary) representation:
/// `Sigma_x = S_ww + S_zz + i (S_zw - S_wz)`.
pub fn recover_complex(
    batch: &OneBitBatch,
    opts: &RecoveryOptions,
) -> Result<ComplexMatrixEstimate> {
    let m = batch
        .complex_channels()
        .ok_or_else(|| Error::Usage("recover_complex needs a complex batch".into()))?;
    if opts.method == Method::Arcsine {
        let mut matrix = arcsine_complex(batch)?;
        let herm = hermitize(&mut matrix);
        let psd = opts.psd_projection;
        if psd {
            matrix = psd_project_hermitian(&matrix);
        }
        return Ok(ComplexMatrixEstimate {
            matrix,
            method: Method::Arcsine,
            hermitized: herm,
            psd_projected: psd,
            flags: PairFlags::default(),
        });
    }
    let stacked = recover_matrix(
        batch,
        &RecoveryOptions {
            psd_projection: false,
            ..*opts
        },
    )?;
    let u = &stacked.matrix;
    let mut matrix = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let re = u[(i, j)] + u[(m + i, m + j)];
            let im = u[(m + i, j)] - u[(i, m + j)];
            matrix[(i, j)] = Complex64::new(re, im);
        }
    }
    let herm = hermitize(&mut matrix);
    let psd = opts.psd_projection;
    if psd {
        matrix = psd_project_hermitian(&matrix);
    }
    Ok(ComplexMatrixEstimate {
        matrix,
        method: opts.method,
        hermitized: herm,
        psd_projected: psd,
        flags: stacked.flags,
    })
}

fn hermitize(m: &mut DMatrix<Complex64>) -> bool {
    let adj = m.adjoint();
    *m = (&*m + adj) * Complex64::new(0.5, 0.0);
    true
}

/// PSD projection for Hermitian matrices by eigenvalue clipping.
pub fn psd_project_hermitian(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..eig.eigenvalues.len() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += v[i] * v[j].conj() * Complex64::new(lambda, 0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{
        quantize_complex, quantize_real, sample_complex_gaussian, sample_gaussian, sample_pair,
        ThresholdSchedule,
    };
    use approx::assert_abs_diff_eq;

    fn staircase(channels: usize, n: usize) -> ThresholdSchedule {
        let levels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
        ThresholdSchedule::staircase(levels, channels, n).unwrap()
    }

    #[test]
    fn pair_pipeline_recovers_parameters() {
        let p = PairParams::new(0.25, 0.6, 0.075).unwrap();
        let n = 100_000;
        let y = sample_pair(&p, n, 1);
        let batch = quantize_real(&y, &staircase(2, n), 1).unwrap();
        let est = recover_pair(&batch, 0, 1, &RecoveryOptions::new(Method::TimeVarying)).unwrap();
        assert!(est.converged);
        assert_abs_diff_eq!(est.params.sigma1(), 0.25, epsilon = 0.01);
        assert_abs_diff_eq!(est.params.sigma2(), 0.6, epsilon = 0.02);
        assert_abs_diff_eq!(est.params.sigma12(), 0.075, epsilon = 0.01);
    }

    #[test]
    fn matrix_reduces_to_pair_for_two_channels() {
        let p = PairParams::new(0.5, 0.9, -0.2).unwrap();
        let n = 20_000;
        let y = sample_pair(&p, n, 2);
        let batch = quantize_real(&y, &staircase(2, n), 2).unwrap();
        let opts = RecoveryOptions::new(Method::TimeVarying);
        let est = recover_pair(&batch, 0, 1, &opts).unwrap();
        let mat = recover_matrix(&batch, &opts).unwrap();
        assert_abs_diff_eq!(
            mat.matrix[(0, 0)],
            est.params.sigma1() * est.params.sigma1(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(mat.matrix[(0, 1)], est.params.sigma12(), epsilon = 1e-12);
    }

    #[test]
    fn diagonal_covariance_gives_small_off_diagonals() {
        let n = 50_000;
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.09, 0.25, 0.49]));
        let y = sample_gaussian(&cov, n, 5).unwrap();
        let batch = quantize_real(&y, &staircase(3, n), 5).unwrap();
        let est = recover_matrix(&batch, &RecoveryOptions::new(Method::TimeVarying)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    // 3 standard errors, conservatively ~3/sqrt(n).
                    assert!(est.matrix[(i, j)].abs() < 3.0 / (n as f64).sqrt() * 2.0);
                }
            }
        }
    }

    #[test]
    fn frobenius_error_decays_like_root_n() {
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[0.36, 0.10, -0.05, 0.10, 0.49, 0.08, -0.05, 0.08, 0.25],
        );
        let opts = RecoveryOptions::new(Method::TimeVarying);
        let mut med_errs = Vec::new();
        for &n in &[1000usize, 10_000, 100_000] {
            let mut errs = Vec::new();
            for rep in 0..20 {
                let seed = 100 + rep;
                let y = sample_gaussian(&cov, n, seed).unwrap();
                let batch = quantize_real(&y, &staircase(3, n), seed).unwrap();
                let est = recover_matrix(&batch, &opts).unwrap();
                errs.push((est.matrix.clone() - cov.clone()).norm());
            }
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            med_errs.push(errs[errs.len() / 2]);
        }
        let slope = (med_errs[2].ln() - med_errs[0].ln()) / ((100_000.0f64).ln() - (1000.0f64).ln());
        assert_abs_diff_eq!(slope, -0.5, epsilon = 0.1);
    }

    #[test]
    fn psd_projection_clips_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&m);
        let eig = SymmetricEigen::new(p.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn complex_recovery_consistency() {
        let m0 = 2;
        let n = 100_000;
        let mut cov = DMatrix::from_element(m0, m0, Complex64::new(0.0, 0.0));
        cov[(0, 0)] = Complex64::new(0.5, 0.0);
        cov[(1, 1)] = Complex64::new(1.2, 0.0);
        cov[(0, 1)] = Complex64::new(0.3, 0.25);
        cov[(1, 0)] = cov[(0, 1)].conj();
        let y = sample_complex_gaussian(&cov, n, 31).unwrap();
        let sched = staircase(2 * m0, n);
        let batch = quantize_complex(&y, &sched, 31).unwrap();
        let est = recover_complex(&batch, &RecoveryOptions::new(Method::TimeVarying)).unwrap();
        assert!(est.hermitized);
        for i in 0..m0 {
            for j in 0..m0 {
                assert!((est.matrix[(i, j)] - cov[(i, j)]).norm() < 0.05);
            }
        }
    }

    #[test]
    fn real_embedded_as_complex_has_tiny_imaginary_part() {
        let n = 50_000;
        let p = PairParams::new(0.7, 0.7, 0.2).unwrap();
        let y = sample_pair(&p, n, 41);
        let mut yc = DMatrix::from_element(2, n, Complex64::new(0.0, 0.0));
        // Independent imaginary copies keep the stacked covariance
        // nonsingular while the cross re/im blocks stay zero.
        let y2 = sample_pair(&p, n, 42);
        for t in 0..n {
            for i in 0..2 {
                yc[(i, t)] = Complex64::new(y[(i, t)], y2[(i, t)]);
            }
        }
        let batch = quantize_complex(&yc, &staircase(4, n), 43).unwrap();
        let est = recover_complex(&batch, &RecoveryOptions::new(Method::TimeVarying)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(est.matrix[(i, j)].im.abs() < 0.02);
            }
        }
    }
}
