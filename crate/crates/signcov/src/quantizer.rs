//! Synthetic Gaussian data generation, threshold schedules and one-bit
//! quantization for real and complex signals.
//!
//! The quantizer is `x_i(t) = sign(y_i(t) - v_i(t))` with `sign(0) = +1`.
//! Complex samples are quantized component-wise: the real and imaginary
//! parts are compared against the same threshold stream, which is
//! equivalent to stacking them as `2M` real channels (the widely linear
//! view used throughout the recovery layer).

use crate::error::{Error, Result};
use crate::gauss::CORR_CLAMP;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of a 2x2 covariance block: standard deviations `sigma1`,
/// `sigma2` and covariance `sigma12`, with `|sigma12| < sigma1 * sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPairParams", into = "RawPairParams")]
pub struct PairParams {
    sigma1: f64,
    sigma2: f64,
    sigma12: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPairParams {
    sigma1: f64,
    sigma2: f64,
    sigma12: f64,
}

impl TryFrom<RawPairParams> for PairParams {
    type Error = Error;
    fn try_from(raw: RawPairParams) -> Result<Self> {
        PairParams::new(raw.sigma1, raw.sigma2, raw.sigma12)
    }
}

impl From<PairParams> for RawPairParams {
    fn from(p: PairParams) -> Self {
        RawPairParams {
            sigma1: p.sigma1,
            sigma2: p.sigma2,
            sigma12: p.sigma12,
        }
    }
}

impl PairParams {
    pub fn new(sigma1: f64, sigma2: f64, sigma12: f64) -> Result<Self> {
        if !(sigma1.is_finite() && sigma2.is_finite() && sigma12.is_finite()) {
            return Err(Error::Domain("pair parameters must be finite".into()));
        }
        if sigma1 <= 0.0 || sigma2 <= 0.0 {
            return Err(Error::Domain(format!(
                "standard deviations must be positive (got {sigma1}, {sigma2})"
            )));
        }
        if sigma12.abs() >= sigma1 * sigma2 {
            return Err(Error::NotPositiveDefinite(format!(
                "|sigma12| = {} must be below sigma1*sigma2 = {}",
                sigma12.abs(),
                sigma1 * sigma2
            )));
        }
        Ok(PairParams {
            sigma1,
            sigma2,
            sigma12,
        })
    }

    /// Build from a correlation coefficient instead of the covariance.
    pub fn from_rho(sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        PairParams::new(sigma1, sigma2, rho * sigma1 * sigma2)
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma12(&self) -> f64 {
        self.sigma12
    }

    pub fn rho(&self) -> f64 {
        self.sigma12 / (self.sigma1 * self.sigma2)
    }

    /// Parameter vector [sigma1, sigma2, sigma12].
    pub fn theta(&self) -> [f64; 3] {
        [self.sigma1, self.sigma2, self.sigma12]
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[
                self.sigma1 * self.sigma1,
                self.sigma12,
                self.sigma12,
                self.sigma2 * self.sigma2,
            ],
        )
    }
}

/// Generator for the threshold values `v_i(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// All thresholds zero (classical sign quantizer).
    Zero,
    /// One constant level for the whole acquisition.
    Constant { level: f64 },
    /// The acquisition is split into `levels.len()` equal sub-intervals,
    /// each holding its own constant level.
    Staircase { levels: Vec<f64> },
    /// A constant level plus white Gaussian dither, drawn independently per
    /// channel and per sample. The realization is intentionally not
    /// recorded: estimators may use only (level, std).
    GaussianDither { level: f64, std: f64 },
    /// Sinusoidal threshold, `amplitude * sin(2 pi t / period)`. Plumbing
    /// only; no estimator specialization.
    Sine { amplitude: f64, period: f64 },
}

/// A per-channel, per-sample threshold schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct ThresholdSchedule {
    kind: ScheduleKind,
    channels: usize,
    len: usize,
}

// Note: `flatten` rules out `deny_unknown_fields` here; strict key
// checking happens on the CLI-facing config structs instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSchedule {
    #[serde(flatten)]
    kind: ScheduleKind,
    channels: usize,
    len: usize,
}

impl TryFrom<RawSchedule> for ThresholdSchedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        ThresholdSchedule::with_kind(raw.kind, raw.channels, raw.len)
    }
}

impl From<ThresholdSchedule> for RawSchedule {
    fn from(s: ThresholdSchedule) -> Self {
        RawSchedule {
            kind: s.kind,
            channels: s.channels,
            len: s.len,
        }
    }
}

impl ThresholdSchedule {
    pub fn with_kind(kind: ScheduleKind, channels: usize, len: usize) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::Dimension(
                "schedule needs at least one channel and one sample".into(),
            ));
        }
        match &kind {
            ScheduleKind::Staircase { levels } => {
                if levels.is_empty() {
                    return Err(Error::Dimension("staircase needs at least one level".into()));
                }
                if len % levels.len() != 0 {
                    return Err(Error::Dimension(format!(
                        "staircase length {len} is not divisible into {} sub-intervals",
                        levels.len()
                    )));
                }
            }
            ScheduleKind::GaussianDither { std, .. } => {
                if !std.is_finite() || *std < 0.0 {
                    return Err(Error::Domain(format!("dither std {std} must be >= 0")));
                }
            }
            ScheduleKind::Sine { period, .. } => {
                if !period.is_finite() || *period <= 0.0 {
                    return Err(Error::Domain(format!("sine period {period} must be > 0")));
                }
            }
            _ => {}
        }
        Ok(ThresholdSchedule {
            kind,
            channels,
            len,
        })
    }

    pub fn zero(channels: usize, len: usize) -> Result<Self> {
        Self::with_kind(ScheduleKind::Zero, channels, len)
    }

    pub fn constant(level: f64, channels: usize, len: usize) -> Result<Self> {
        Self::with_kind(ScheduleKind::Constant { level }, channels, len)
    }

    pub fn staircase(levels: Vec<f64>, channels: usize, len: usize) -> Result<Self> {
        Self::with_kind(ScheduleKind::Staircase { levels }, channels, len)
    }

    pub fn gaussian_dither(level: f64, std: f64, channels: usize, len: usize) -> Result<Self> {
        Self::with_kind(ScheduleKind::GaussianDither { level, std }, channels, len)
    }

    pub fn sine(amplitude: f64, period: f64, channels: usize, len: usize) -> Result<Self> {
        Self::with_kind(ScheduleKind::Sine { amplitude, period }, channels, len)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ScheduleKind::Zero)
    }

    /// A schedule is deterministic when its values are known exactly;
    /// dithered schedules expose only their statistical description.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self.kind, ScheduleKind::GaussianDither { .. })
    }

    /// Deterministic threshold value for channel `i` at sample `t`, shared
    /// across channels by construction. `None` for dithered schedules.
    pub fn value(&self, t: usize) -> Option<f64> {
        debug_assert!(t < self.len);
        match &self.kind {
            ScheduleKind::Zero => Some(0.0),
            ScheduleKind::Constant { level } => Some(*level),
            ScheduleKind::Staircase { levels } => {
                let n = self.len / levels.len();
                Some(levels[(t / n).min(levels.len() - 1)])
            }
            ScheduleKind::Sine { amplitude, period } => {
                Some(amplitude * (2.0 * std::f64::consts::PI * (t as f64) / period).sin())
            }
            ScheduleKind::GaussianDither { .. } => None,
        }
    }

    /// Materialize the full `channels x len` threshold matrix of a
    /// deterministic schedule.
    pub fn materialize(&self) -> Option<DMatrix<f64>> {
        if !self.is_deterministic() {
            return None;
        }
        let mut m = DMatrix::zeros(self.channels, self.len);
        for t in 0..self.len {
            let v = self.value(t).expect("deterministic schedule");
            for i in 0..self.channels {
                m[(i, t)] = v;
            }
        }
        Some(m)
    }
}

/// N sign-vector observations together with the schedule that produced
/// them and the seed of the quantization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitBatch {
    signs: DMatrix<i8>,
    schedule: ThresholdSchedule,
    seed: u64,
    complex: bool,
}

impl OneBitBatch {
    pub(crate) fn from_parts(
        signs: DMatrix<i8>,
        schedule: ThresholdSchedule,
        seed: u64,
        complex: bool,
    ) -> Result<Self> {
        if signs.nrows() != schedule.channels() || signs.ncols() != schedule.len() {
            return Err(Error::Dimension(format!(
                "sign matrix {}x{} does not match schedule {}x{}",
                signs.nrows(),
                signs.ncols(),
                schedule.channels(),
                schedule.len()
            )));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Format("sign entries must be +1 or -1".into()));
        }
        Ok(OneBitBatch {
            signs,
            schedule,
            seed,
            complex,
        })
    }

    /// Number of real channels (2M for a complex batch of M channels).
    pub fn channels(&self) -> usize {
        self.signs.nrows()
    }

    pub fn len(&self) -> usize {
        self.signs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sign(&self, channel: usize, t: usize) -> i8 {
        self.signs[(channel, t)]
    }

    pub fn signs(&self) -> &DMatrix<i8> {
        &self.signs
    }

    pub fn schedule(&self) -> &ThresholdSchedule {
        &self.schedule
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    /// Number of complex channels for a complex batch.
    pub fn complex_channels(&self) -> Option<usize> {
        self.complex.then_some(self.channels() / 2)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw `n` i.i.d. zero-mean Gaussian vectors with the given covariance.
/// Samples are generated one time step at a time (channel-major within a
/// step), so the stream is reproducible from the seed alone.
pub fn sample_gaussian(cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    if n == 0 {
        return Err(Error::Dimension("need at least one sample".into()));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let l = chol.l();
    let m = cov.nrows();
    let mut rng = rng_for(seed);
    let mut out = DMatrix::zeros(m, n);
    let mut z = vec![0.0_f64; m];
    for t in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..m {
            let mut acc = 0.0;
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                acc += l[(i, k)] * zk;
            }
            out[(i, t)] = acc;
        }
    }
    Ok(out)
}

/// Draw pair samples (2 x n) for a 2x2 covariance block.
pub fn sample_pair(params: &PairParams, n: usize, seed: u64) -> DMatrix<f64> {
    sample_gaussian(&params.covariance(), n, seed).expect("pair covariance is positive definite")
}

/// Draw `n` circular complex Gaussian vectors with Hermitian covariance
/// `cov`, via the stacked real representation with covariance
/// [[Re, -Im], [Im, Re]] / 2.
pub fn sample_complex_gaussian(
    cov: &DMatrix<Complex64>,
    n: usize,
    seed: u64,
) -> Result<DMatrix<Complex64>> {
    let m = cov.nrows();
    if cov.ncols() != m {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let mut real = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            let c = cov[(i, j)];
            real[(i, j)] = 0.5 * c.re;
            real[(m + i, m + j)] = 0.5 * c.re;
            real[(m + i, j)] = 0.5 * c.im;
            real[(i, m + j)] = -0.5 * c.im;
        }
    }
    // A Hermitian PSD complex covariance can make the stacked matrix
    // singular only in degenerate cases; regularize the factorization by a
    // relative jitter if needed.
    let stacked = sample_gaussian(&real, n, seed).or_else(|_| {
        let scale = real.diagonal().amax();
        let jitter = DMatrix::identity(2 * m, 2 * m) * (scale * 1e-12);
        sample_gaussian(&(real + jitter), n, seed)
    })?;
    let mut out = DMatrix::zeros(m, n);
    for t in 0..n {
        for i in 0..m {
            out[(i, t)] = Complex64::new(stacked[(i, t)], stacked[(m + i, t)]);
        }
    }
    Ok(out)
}

#[inline]
fn sign_of(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Quantize real samples: `x_i(t) = sign(y_i(t) - v_i(t))`, `sign(0) = +1`.
/// The seed feeds the dither stream for dithered schedules and is recorded
/// either way.
pub fn quantize_real(
    y: &DMatrix<f64>,
    schedule: &ThresholdSchedule,
    seed: u64,
) -> Result<OneBitBatch> {
    if y.nrows() != schedule.channels() || y.ncols() != schedule.len() {
        return Err(Error::Dimension(format!(
            "samples {}x{} do not match schedule {}x{}",
            y.nrows(),
            y.ncols(),
            schedule.channels(),
            schedule.len()
        )));
    }
    let m = y.nrows();
    let n = y.ncols();
    let mut signs = DMatrix::from_element(m, n, 1i8);
    match schedule.kind() {
        ScheduleKind::GaussianDither { level, std } => {
            let mut rng = rng_for(seed);
            for t in 0..n {
                for i in 0..m {
                    let d: f64 = rng.sample(StandardNormal);
                    signs[(i, t)] = sign_of(y[(i, t)] - (level + std * d));
                }
            }
        }
        _ => {
            for t in 0..n {
                let v = schedule.value(t).expect("deterministic schedule");
                for i in 0..m {
                    signs[(i, t)] = sign_of(y[(i, t)] - v);
                }
            }
        }
    }
    OneBitBatch::from_parts(signs, schedule.clone(), seed, false)
}

/// Quantize complex samples component-wise with a shared threshold stream:
/// the output batch holds 2M real channels, rows `0..M` the real parts and
/// rows `M..2M` the imaginary parts. The schedule must be built for `2M`
/// channels; dither draws are independent across all 2M components.
pub fn quantize_complex(
    y: &DMatrix<Complex64>,
    schedule: &ThresholdSchedule,
    seed: u64,
) -> Result<OneBitBatch> {
    let m = y.nrows();
    let n = y.ncols();
    if schedule.channels() != 2 * m || schedule.len() != n {
        return Err(Error::Dimension(format!(
            "complex samples {m}x{n} need a schedule for {}x{} (got {}x{})",
            2 * m,
            n,
            schedule.channels(),
            schedule.len()
        )));
    }
    let mut stacked = DMatrix::zeros(2 * m, n);
    for t in 0..n {
        for i in 0..m {
            stacked[(i, t)] = y[(i, t)].re;
            stacked[(m + i, t)] = y[(i, t)].im;
        }
    }
    let mut batch = quantize_real(&stacked, schedule, seed)?;
    batch.complex = true;
    Ok(batch)
}

/// Clamp a correlation estimate into the open interval used by the
/// estimators.
pub(crate) fn clamp_rho(rho: f64) -> f64 {
    rho.clamp(-1.0 + CORR_CLAMP, 1.0 - CORR_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::q_raw;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pair_params_validation() {
        assert!(PairParams::new(0.25, 0.6, -0.08).is_ok());
        assert!(PairParams::new(-1.0, 0.6, 0.0).is_err());
        assert!(PairParams::new(0.5, 0.5, 0.25).is_err());
        let p = PairParams::from_rho(0.25, 0.6, 0.5).unwrap();
        assert_abs_diff_eq!(p.sigma12(), 0.075, epsilon = 1e-15);
        assert_abs_diff_eq!(p.rho(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = PairParams::new(1.0, 1.0, 0.3).unwrap();
        let a = sample_pair(&p, 500, 7);
        let b = sample_pair(&p, 500, 7);
        assert_eq!(a, b);
        let c = sample_pair(&p, 500, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_covariance_converges() {
        let p = PairParams::new(1.0, 1.0, 0.0).unwrap();
        let n = 1_000_000;
        let y = sample_pair(&p, n, 7);
        let mut s = [0.0f64; 3];
        for t in 0..n {
            s[0] += y[(0, t)] * y[(0, t)];
            s[1] += y[(1, t)] * y[(1, t)];
            s[2] += y[(0, t)] * y[(1, t)];
        }
        assert_abs_diff_eq!(s[0] / n as f64, 1.0, epsilon = 5e-3);
        assert_abs_diff_eq!(s[1] / n as f64, 1.0, epsilon = 5e-3);
        assert_abs_diff_eq!(s[2] / n as f64, 0.0, epsilon = 5e-3);
    }

    #[test]
    fn sample_rho_matches_population() {
        let p = PairParams::new(0.25, 0.6, -0.08).unwrap();
        let n = 1_000_000;
        let y = sample_pair(&p, n, 11);
        let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
        for t in 0..n {
            s11 += y[(0, t)] * y[(0, t)];
            s22 += y[(1, t)] * y[(1, t)];
            s12 += y[(0, t)] * y[(1, t)];
        }
        let rho = s12 / (s11 * s22).sqrt();
        assert_abs_diff_eq!(rho, -0.5333, epsilon = 0.005);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            sample_gaussian(&cov, 10, 0),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn sign_convention_at_zero() {
        let sched = ThresholdSchedule::zero(1, 1).unwrap();
        let y = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = quantize_real(&y, &sched, 0).unwrap();
        assert_eq!(b.sign(0, 0), 1);
    }

    #[test]
    fn threshold_shifts_sign() {
        let sched = ThresholdSchedule::constant(-0.5, 1, 2).unwrap();
        let y = DMatrix::from_row_slice(1, 2, &[-0.3, -0.7]);
        let b = quantize_real(&y, &sched, 0).unwrap();
        assert_eq!(b.sign(0, 0), 1); // y - v = 0.2 >= 0
        assert_eq!(b.sign(0, 1), -1);
    }

    #[test]
    fn plus_fraction_matches_tail_probability() {
        let n = 1_000_000;
        let sched = ThresholdSchedule::constant(0.5, 1, n).unwrap();
        let cov = DMatrix::from_row_slice(1, 1, &[1.0]);
        let y = sample_gaussian(&cov, n, 3).unwrap();
        let b = quantize_real(&y, &sched, 3).unwrap();
        let plus = (0..n).filter(|&t| b.sign(0, t) == 1).count() as f64;
        assert_abs_diff_eq!(plus / n as f64, q_raw(0.5), epsilon = 2e-3);
    }

    #[test]
    fn staircase_single_level_equals_constant() {
        let p = PairParams::new(0.8, 1.2, 0.3).unwrap();
        let y = sample_pair(&p, 400, 5);
        let stair = ThresholdSchedule::staircase(vec![0.4], 2, 400).unwrap();
        let cons = ThresholdSchedule::constant(0.4, 2, 400).unwrap();
        let a = quantize_real(&y, &stair, 9).unwrap();
        let b = quantize_real(&y, &cons, 9).unwrap();
        assert_eq!(a.signs(), b.signs());
    }

    #[test]
    fn staircase_length_must_divide() {
        assert!(ThresholdSchedule::staircase(vec![0.1, 0.2, 0.3], 2, 100).is_err());
        assert!(ThresholdSchedule::staircase(vec![0.1, 0.2], 2, 100).is_ok());
    }

    #[test]
    fn complex_quantization_examples() {
        let sched = ThresholdSchedule::zero(2, 2).unwrap();
        let y = DMatrix::from_row_slice(
            1,
            2,
            &[Complex64::new(1.0, 1.0), Complex64::new(-1.0, 2.0)],
        );
        let b = quantize_complex(&y, &sched, 0).unwrap();
        assert!(b.is_complex());
        assert_eq!(b.complex_channels(), Some(1));
        assert_eq!((b.sign(0, 0), b.sign(1, 0)), (1, 1));
        assert_eq!((b.sign(0, 1), b.sign(1, 1)), (-1, 1));
    }

    #[test]
    fn complex_component_tail_probability() {
        // Unit-power circular Gaussian has per-component variance 1/2.
        let n = 1_000_000;
        let cov = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        let y = sample_complex_gaussian(&cov, n, 13).unwrap();
        let sched = ThresholdSchedule::constant(0.2, 2, n).unwrap();
        let b = quantize_complex(&y, &sched, 13).unwrap();
        let plus = (0..n).filter(|&t| b.sign(0, t) == 1).count() as f64;
        assert_abs_diff_eq!(plus / n as f64, q_raw(0.2 / 0.5f64.sqrt()), epsilon = 2e-3);
    }

    #[test]
    fn schedule_json_round_trip() {
        let s = ThresholdSchedule::staircase(vec![0.1, 0.2, 0.3, 0.4, 0.5], 2, 1000).unwrap();
        let js = serde_json::to_string(&s).unwrap();
        let back: ThresholdSchedule = serde_json::from_str(&js).unwrap();
        assert_eq!(s, back);
    }
}
