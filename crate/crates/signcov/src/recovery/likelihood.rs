//! Log-likelihood machinery for one-bit observations under known
//! per-sample thresholds.
//!
//! For a single channel the per-sample log-likelihood is
//! `log Q(x v / sigma)`; for a channel pair it is `log o`, where `o` is the
//! probability of the observed sign pattern. With the signed arguments
//! `z_i = x_i v_i / sigma_i` and signed correlation `x1 x2 rho`, every
//! outcome probability is one upper orthant probability, which keeps small
//! probabilities free of cancellation.
//!
//! Samples sharing a threshold pair are interchangeable, so all sums are
//! taken over cells of identical thresholds weighted by outcome counts.
//! Counts are kept as `f64`: the estimators fill them with integers, while
//! tests and the information-matrix code reuse the same sums with
//! fractional (expected) weights.

use crate::error::{Error, Result};
use crate::gauss::{bvn_pdf_drho, bvn_pdf_raw, g_kernel_raw, phi, q_raw};
use crate::quantizer::{clamp_rho, OneBitBatch};
use std::collections::HashMap;

/// Floor applied to probabilities before logs and divisions.
const PROB_FLOOR: f64 = 1e-300;

/// Sign patterns of a channel pair in a fixed order.
pub const OUTCOMES: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

/// Index of a sign pattern in [`OUTCOMES`].
#[inline]
pub fn outcome_index(x1: i8, x2: i8) -> usize {
    match (x1, x2) {
        (1, 1) => 0,
        (1, -1) => 1,
        (-1, 1) => 2,
        _ => 3,
    }
}

/// Counts of +1 / -1 at one threshold level of a single channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCell {
    pub v: f64,
    pub plus: f64,
    pub minus: f64,
}

impl ChannelCell {
    pub fn total(&self) -> f64 {
        self.plus + self.minus
    }
}

/// Outcome counts at one threshold pair of a channel pair, ordered as in
/// [`OUTCOMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairCell {
    pub v1: f64,
    pub v2: f64,
    pub counts: [f64; 4],
}

impl PairCell {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Group one channel of a batch into threshold cells. Requires a
/// deterministic schedule; cells appear in order of first occurrence.
pub fn channel_cells(batch: &OneBitBatch, channel: usize) -> Result<Vec<ChannelCell>> {
    if channel >= batch.channels() {
        return Err(Error::Dimension(format!(
            "channel {channel} out of range (batch has {})",
            batch.channels()
        )));
    }
    if !batch.schedule().is_deterministic() {
        return Err(Error::Usage(
            "dithered schedules expose only statistics; use the constant-threshold path".into(),
        ));
    }
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut cells: Vec<ChannelCell> = Vec::new();
    for t in 0..batch.len() {
        let v = batch.schedule().value(t).expect("deterministic");
        let idx = *index.entry(v.to_bits()).or_insert_with(|| {
            cells.push(ChannelCell {
                v,
                plus: 0.0,
                minus: 0.0,
            });
            cells.len() - 1
        });
        if batch.sign(channel, t) == 1 {
            cells[idx].plus += 1.0;
        } else {
            cells[idx].minus += 1.0;
        }
    }
    Ok(cells)
}

/// Group a channel pair of a batch into threshold cells with outcome
/// counts.
pub fn pair_cells(batch: &OneBitBatch, ch1: usize, ch2: usize) -> Result<Vec<PairCell>> {
    let m = batch.channels();
    if ch1 >= m || ch2 >= m || ch1 == ch2 {
        return Err(Error::Dimension(format!(
            "invalid channel pair ({ch1}, {ch2}) for {m} channels"
        )));
    }
    if !batch.schedule().is_deterministic() {
        return Err(Error::Usage(
            "dithered schedules expose only statistics; use the constant-threshold path".into(),
        ));
    }
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut cells: Vec<PairCell> = Vec::new();
    for t in 0..batch.len() {
        let v = batch.schedule().value(t).expect("deterministic");
        // Shared generator values; the likelihood below supports v1 != v2.
        let key = (v.to_bits(), v.to_bits());
        let idx = *index.entry(key).or_insert_with(|| {
            cells.push(PairCell {
                v1: v,
                v2: v,
                counts: [0.0; 4],
            });
            cells.len() - 1
        });
        cells[idx].counts[outcome_index(batch.sign(ch1, t), batch.sign(ch2, t))] += 1.0;
    }
    Ok(cells)
}

// Single-channel kernels: Delta1 = d/dsigma Q(v/sigma) and its derivative.
#[inline]
fn delta1(sigma: f64, v: f64) -> f64 {
    v / (sigma * sigma) * phi(v / sigma)
}

#[inline]
fn delta2(sigma: f64, v: f64) -> f64 {
    (v * v * v - 2.0 * v * sigma * sigma) / sigma.powi(5) * phi(v / sigma)
}

/// Single-channel log-likelihood of `sigma` over grouped counts.
pub fn channel_loglik(sigma: f64, cells: &[ChannelCell]) -> f64 {
    let mut ll = 0.0;
    for c in cells {
        let p_plus = q_raw(c.v / sigma).max(PROB_FLOOR);
        let p_minus = q_raw(-c.v / sigma).max(PROB_FLOOR);
        if c.plus > 0.0 {
            ll += c.plus * p_plus.ln();
        }
        if c.minus > 0.0 {
            ll += c.minus * p_minus.ln();
        }
    }
    ll
}

/// Score dL/dsigma of the single-channel likelihood.
pub fn channel_score(sigma: f64, cells: &[ChannelCell]) -> f64 {
    let mut s = 0.0;
    for c in cells {
        let d1 = delta1(sigma, c.v);
        if c.plus > 0.0 {
            s += c.plus * d1 / q_raw(c.v / sigma).max(PROB_FLOOR);
        }
        if c.minus > 0.0 {
            s -= c.minus * d1 / q_raw(-c.v / sigma).max(PROB_FLOOR);
        }
    }
    s
}

/// Curvature d2L/dsigma2 of the single-channel likelihood.
pub fn channel_curvature(sigma: f64, cells: &[ChannelCell]) -> f64 {
    let mut h = 0.0;
    for c in cells {
        let d1 = delta1(sigma, c.v);
        let d2 = delta2(sigma, c.v);
        if c.plus > 0.0 {
            let p = q_raw(c.v / sigma).max(PROB_FLOOR);
            h += c.plus * (p * d2 - d1 * d1) / (p * p);
        }
        if c.minus > 0.0 {
            // q = p - 1 for a -1 observation.
            let pm = q_raw(-c.v / sigma).max(PROB_FLOOR);
            h += c.minus * (-pm * d2 - d1 * d1) / (pm * pm);
        }
    }
    h
}

/// Probability of the sign pattern (x1, x2) at thresholds (v1, v2) under
/// parameters theta = [sigma1, sigma2, sigma12].
#[inline]
pub fn outcome_prob(theta: [f64; 3], v1: f64, v2: f64, x1: f64, x2: f64) -> f64 {
    let rho = clamp_rho(theta[2] / (theta[0] * theta[1]));
    let z1 = x1 * v1 / theta[0];
    let z2 = x2 * v2 / theta[1];
    crate::gauss::bvn_orthant_raw(z1, z2, x1 * x2 * rho)
}

/// Per-sample log-likelihood log o(theta; x, v).
pub fn sample_loglik(theta: [f64; 3], v1: f64, v2: f64, x1: f64, x2: f64) -> f64 {
    outcome_prob(theta, v1, v2, x1, x2).max(PROB_FLOOR).ln()
}

/// Per-sample gradient of the log-likelihood with respect to
/// (sigma1, sigma2, sigma12).
pub fn sample_gradient(theta: [f64; 3], v1: f64, v2: f64, x1: f64, x2: f64) -> [f64; 3] {
    let [s1, s2, _] = theta;
    let rho = clamp_rho(theta[2] / (s1 * s2));
    let z1 = x1 * v1 / s1;
    let z2 = x2 * v2 / s2;
    let rs = x1 * x2 * rho;
    let o = crate::gauss::bvn_orthant_raw(z1, z2, rs).max(PROB_FLOOR);
    [
        g_kernel_raw(z1, z2, rs) / (s1 * o),
        g_kernel_raw(z2, z1, rs) / (s2 * o),
        x1 * x2 * bvn_pdf_raw(z1, z2, rs) / (s1 * s2 * o),
    ]
}

/// Pairwise log-likelihood over grouped cells.
pub fn pair_loglik(theta: [f64; 3], cells: &[PairCell]) -> f64 {
    let mut ll = 0.0;
    for c in cells {
        for (k, &(x1, x2)) in OUTCOMES.iter().enumerate() {
            if c.counts[k] > 0.0 {
                ll += c.counts[k] * sample_loglik(theta, c.v1, c.v2, x1, x2);
            }
        }
    }
    ll
}

/// Score dL/dsigma12 with sigma1 and sigma2 held fixed.
pub fn pair_score_sigma12(theta: [f64; 3], cells: &[PairCell]) -> f64 {
    let [s1, s2, _] = theta;
    let rho = clamp_rho(theta[2] / (s1 * s2));
    let mut score = 0.0;
    for c in cells {
        let w1 = c.v1 / s1;
        let w2 = c.v2 / s2;
        // d p12 / d sigma12, shared by all four outcomes up to sign x1 x2.
        let d1 = bvn_pdf_raw(w1, w2, rho) / (s1 * s2);
        for (k, &(x1, x2)) in OUTCOMES.iter().enumerate() {
            if c.counts[k] > 0.0 {
                let o = outcome_prob(theta, c.v1, c.v2, x1, x2).max(PROB_FLOOR);
                score += c.counts[k] * x1 * x2 * d1 / o;
            }
        }
    }
    score
}

/// Curvature d2L/dsigma12^2 with sigma1 and sigma2 held fixed.
pub fn pair_curvature_sigma12(theta: [f64; 3], cells: &[PairCell]) -> f64 {
    let [s1, s2, _] = theta;
    let rho = clamp_rho(theta[2] / (s1 * s2));
    let mut h = 0.0;
    for c in cells {
        let w1 = c.v1 / s1;
        let w2 = c.v2 / s2;
        let d1 = bvn_pdf_raw(w1, w2, rho) / (s1 * s2);
        let d2 = bvn_pdf_drho(w1, w2, rho) / (s1 * s1 * s2 * s2);
        for (k, &(x1, x2)) in OUTCOMES.iter().enumerate() {
            if c.counts[k] > 0.0 {
                let o = outcome_prob(theta, c.v1, c.v2, x1, x2).max(PROB_FLOOR);
                h += c.counts[k] * (o * x1 * x2 * d2 - d1 * d1) / (o * o);
            }
        }
    }
    h
}

/// Full gradient of the pairwise log-likelihood.
pub fn joint_gradient(theta: [f64; 3], cells: &[PairCell]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for c in cells {
        for (k, &(x1, x2)) in OUTCOMES.iter().enumerate() {
            if c.counts[k] > 0.0 {
                let s = sample_gradient(theta, c.v1, c.v2, x1, x2);
                g[0] += c.counts[k] * s[0];
                g[1] += c.counts[k] * s[1];
                g[2] += c.counts[k] * s[2];
            }
        }
    }
    g
}

/// All per-sample quantities entering the likelihood and its first two
/// derivatives, evaluated at one (theta, thresholds, sign pattern) point.
/// Mostly a test and diagnostics surface.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodTerms {
    /// Marginal +1 probabilities Q(v_i / sigma_i).
    pub p1: f64,
    pub p2: f64,
    /// Joint ++ probability at the unsigned thresholds.
    pub p12: f64,
    /// Per-channel likelihood denominators q_i = (x_i - 1)/2 + p_i.
    pub q1: f64,
    pub q2: f64,
    /// Per-channel kernels for each channel.
    pub delta1: [f64; 2],
    pub delta2: [f64; 2],
    /// Cross kernels for the sigma12 derivative.
    pub delta1_cross: f64,
    pub delta2_cross: f64,
    /// Probability of the observed sign pattern.
    pub o: f64,
    /// Scaled thresholds w_i = v_i / sigma_i and signed z_i = x_i w_i.
    pub w: [f64; 2],
    pub z: [f64; 2],
    /// Quadratic form w1^2 + w2^2 - 2 rho w1 w2.
    pub u: f64,
}

impl LikelihoodTerms {
    pub fn at(theta: [f64; 3], v1: f64, v2: f64, x1: f64, x2: f64) -> Self {
        let [s1, s2, _] = theta;
        let rho = clamp_rho(theta[2] / (s1 * s2));
        let w = [v1 / s1, v2 / s2];
        let z = [x1 * w[0], x2 * w[1]];
        let p1 = q_raw(w[0]);
        let p2 = q_raw(w[1]);
        LikelihoodTerms {
            p1,
            p2,
            p12: crate::gauss::bvn_orthant_raw(w[0], w[1], rho),
            q1: 0.5 * (x1 - 1.0) + p1,
            q2: 0.5 * (x2 - 1.0) + p2,
            delta1: [delta1(s1, v1), delta1(s2, v2)],
            delta2: [delta2(s1, v1), delta2(s2, v2)],
            delta1_cross: x1 * x2 * bvn_pdf_raw(w[0], w[1], rho) / (s1 * s2),
            delta2_cross: x1 * x2 * bvn_pdf_drho(w[0], w[1], rho) / (s1 * s1 * s2 * s2),
            o: outcome_prob(theta, v1, v2, x1, x2),
            w,
            z,
            u: w[0] * w[0] + w[1] * w[1] - 2.0 * rho * w[0] * w[1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{quantize_real, sample_pair, PairParams, ThresholdSchedule};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn fd_theta(
        f: impl Fn([f64; 3]) -> f64,
        theta: [f64; 3],
        i: usize,
        h: f64,
    ) -> f64 {
        let mut up = theta;
        let mut dn = theta;
        up[i] += h;
        dn[i] -= h;
        (f(up) - f(dn)) / (2.0 * h)
    }

    #[test]
    fn outcome_probs_sum_to_one() {
        let theta = [0.7, 1.3, 0.5];
        for (v1, v2) in [(0.4, 0.4), (0.0, 0.9), (-0.3, 1.2)] {
            let total: f64 = OUTCOMES
                .iter()
                .map(|&(x1, x2)| outcome_prob(theta, v1, v2, x1, x2))
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn channel_score_matches_finite_differences() {
        let cells = vec![
            ChannelCell { v: 0.3, plus: 40.0, minus: 60.0 },
            ChannelCell { v: 0.8, plus: 11.0, minus: 89.0 },
        ];
        let sigma = 0.55;
        let h = 1e-6;
        let fd = (channel_loglik(sigma + h, &cells) - channel_loglik(sigma - h, &cells)) / (2.0 * h);
        assert_relative_eq!(channel_score(sigma, &cells), fd, max_relative = 1e-6);
        let fd2 = (channel_score(sigma + h, &cells) - channel_score(sigma - h, &cells)) / (2.0 * h);
        assert_relative_eq!(channel_curvature(sigma, &cells), fd2, max_relative = 1e-5);
    }

    #[test]
    fn pair_score_and_curvature_match_finite_differences() {
        let cells = vec![
            PairCell { v1: 0.3, v2: 0.5, counts: [25.0, 30.0, 20.0, 25.0] },
            PairCell { v1: 0.9, v2: 0.7, counts: [10.0, 35.0, 30.0, 25.0] },
        ];
        let theta = [0.8, 1.1, -0.35];
        let h = 1e-7;
        let fd = fd_theta(|th| pair_loglik(th, &cells), theta, 2, h);
        assert_relative_eq!(pair_score_sigma12(theta, &cells), fd, max_relative = 1e-6);
        let fd2 = fd_theta(|th| pair_score_sigma12(th, &cells), theta, 2, h * 10.0);
        assert_relative_eq!(pair_curvature_sigma12(theta, &cells), fd2, max_relative = 1e-5);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let cells = vec![
            PairCell { v1: 0.4, v2: 0.4, counts: [22.0, 28.0, 31.0, 19.0] },
            PairCell { v1: 1.0, v2: 0.6, counts: [9.0, 41.0, 28.0, 22.0] },
        ];
        let theta = [0.6, 0.9, 0.22];
        let g = joint_gradient(theta, &cells);
        for i in 0..3 {
            let fd = fd_theta(|th| pair_loglik(th, &cells), theta, i, 1e-7);
            assert_relative_eq!(g[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn grouping_reproduces_per_sample_sums() {
        let p = PairParams::new(0.5, 0.8, 0.2).unwrap();
        let n = 600;
        let y = sample_pair(&p, n, 33);
        let sched =
            ThresholdSchedule::staircase(vec![0.2, 0.5, 0.9], 2, n).unwrap();
        let batch = quantize_real(&y, &sched, 33).unwrap();
        let cells = pair_cells(&batch, 0, 1).unwrap();
        assert_eq!(cells.len(), 3);
        let theta = p.theta();
        let grouped = pair_loglik(theta, &cells);
        let mut direct = 0.0;
        for t in 0..n {
            let v = batch.schedule().value(t).unwrap();
            direct += sample_loglik(
                theta,
                v,
                v,
                batch.sign(0, t) as f64,
                batch.sign(1, t) as f64,
            );
        }
        assert_relative_eq!(grouped, direct, max_relative = 1e-12);
    }

    #[test]
    fn likelihood_terms_are_coherent() {
        let theta = [0.7, 1.2, 0.3];
        let terms = LikelihoodTerms::at(theta, 0.5, 0.8, 1.0, -1.0);
        assert_abs_diff_eq!(terms.q1, terms.p1, epsilon = 1e-15);
        assert_abs_diff_eq!(terms.q2, terms.p2 - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            terms.o,
            terms.p1 - terms.p12,
            epsilon = 1e-12
        );
        assert!(terms.o > 0.0 && terms.o < 1.0);
    }
}
