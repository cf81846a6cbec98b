//! Numerical self-verification: derivative identities, probability
//! identities, moment formulas, and solver behavior checked against
//! independent routes (finite differences, adaptive quadrature, brute-force
//! enumeration). Run by the `selftest` CLI subcommand and reused by the
//! acceptance test suite.

use crate::gauss::{bvn_orthant_raw, bvn_pdf_raw};
use crate::quantizer::{quantize_real, sample_pair, PairParams, ThresholdSchedule};
use crate::recovery::likelihood::{
    channel_curvature, channel_loglik, channel_score, pair_curvature_sigma12, pair_loglik,
    pair_score_sigma12, sample_gradient, sample_loglik, ChannelCell, PairCell, OUTCOMES,
};
use crate::recovery::{joint_mle, mle_sigma12_newton, mle_sigma_newton, recover_sigma};
use crate::recovery::{JointOptions, Method, NewtonOptions, RecoveryOptions};
use crate::theory::{binomial_proportion_moment, fim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Check { name, pass, detail }
    }
}

// ---------------------------------------------------------------------
// Independent quadrature oracle for the orthant probability.
// ---------------------------------------------------------------------

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let c = 0.5 * (a + b);
    let fa = f(a);
    let fb = f(b);
    let fc = f(c);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let c = 0.5 * (a + b);
    let d = 0.5 * (a + c);
    let e = 0.5 * (c + b);
    let fd = f(d);
    let fe = f(e);
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, c, fa, fc, fd, left, 0.5 * tol, depth - 1)
            + simpson_step(f, c, b, fc, fb, fe, right, 0.5 * tol, depth - 1)
    }
}

/// Orthant probability by direct 2-D adaptive quadrature of the density.
/// Independent of the Gauss-Legendre implementation it checks. The inner
/// integral is split at the conditional mean so the recursion cannot step
/// over the density ridge at high correlation.
pub fn orthant_quadrature_oracle(k1: f64, k2: f64, rho: f64, tol: f64) -> f64 {
    // The standardized density is negligible beyond |y| ~ 10.
    let hi1 = k1.max(0.0) + 10.0;
    let hi2 = k2.max(0.0).max(rho.abs() * hi1) + 10.0;
    let inner = move |y1: f64| {
        let f = move |y2: f64| bvn_pdf_raw(y1, y2, rho);
        let itol = tol / (hi1 - k1).max(1.0);
        let center = rho * y1;
        if center > k2 && center < hi2 {
            adaptive_simpson(&f, k2, center, itol, 40)
                + adaptive_simpson(&f, center, hi2, itol, 40)
        } else {
            adaptive_simpson(&f, k2, hi2, itol, 40)
        }
    };
    adaptive_simpson(&inner, k1, hi1, tol, 40)
}

// ---------------------------------------------------------------------
// Individual checks.
// ---------------------------------------------------------------------

fn random_theta(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let s1: f64 = rng.random_range(0.2..1.5);
    let s2: f64 = rng.random_range(0.2..1.5);
    let rho: f64 = rng.random_range(-0.9..0.9);
    [s1, s2, rho * s1 * s2]
}

/// Fourth-order central difference along coordinate `i`.
fn central_diff5(f: impl Fn([f64; 3]) -> f64, theta: [f64; 3], i: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut t = theta;
        t[i] += d;
        f(t)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn check_scores_fd(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = random_theta(&mut rng);
        let v1: f64 = rng.random_range(0.1..1.2);
        let v2: f64 = rng.random_range(0.1..1.2);
        let x1 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let x2 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let g = sample_gradient(theta, v1, v2, x1, x2);
        for i in 0..3 {
            let h = 1e-5 * theta[i].abs().max(0.05);
            let fd = central_diff5(|t| sample_loglik(t, v1, v2, x1, x2), theta, i, h);
            // Differences of the log-likelihood carry cancellation noise,
            // so tiny gradients are compared on an absolute floor.
            let scale = fd.abs().max(1e-2);
            worst = worst.max((g[i] - fd).abs() / scale);
        }
        // Per-channel score on a synthetic cell.
        let cells = [ChannelCell {
            v: v1,
            plus: 37.0,
            minus: 63.0,
        }];
        let h = 1e-5 * theta[0];
        let fd = central_diff5(
            |t| channel_loglik(t[0], &cells),
            theta,
            0,
            h,
        );
        let s = channel_score(theta[0], &cells);
        worst = worst.max((s - fd).abs() / fd.abs().max(1e-2));
    }
    Check::new(
        "scores_vs_finite_differences",
        worst <= 1e-6,
        format!("worst relative deviation {worst:.3e} (tolerance 1e-6, FD step 1e-6)"),
    )
}

fn check_curvatures_fd(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = random_theta(&mut rng);
        let v1: f64 = rng.random_range(0.1..1.2);
        let v2: f64 = rng.random_range(0.1..1.2);
        let cells = [
            PairCell {
                v1,
                v2,
                counts: [
                    rng.random_range(5.0..50.0),
                    rng.random_range(5.0..50.0),
                    rng.random_range(5.0..50.0),
                    rng.random_range(5.0..50.0),
                ],
            },
        ];
        let h = 1e-6 * (theta[0] * theta[1]).max(0.05);
        let mut up = theta;
        let mut dn = theta;
        up[2] += h;
        dn[2] -= h;
        let fd = (pair_score_sigma12(up, &cells) - pair_score_sigma12(dn, &cells)) / (2.0 * h);
        let c = pair_curvature_sigma12(theta, &cells);
        worst = worst.max((c - fd).abs() / fd.abs().max(1e-2));

        let ch = [ChannelCell {
            v: v1,
            plus: rng.random_range(5.0..95.0),
            minus: 50.0,
        }];
        let hs = 1e-6 * theta[0];
        let fd = (channel_score(theta[0] + hs, &ch) - channel_score(theta[0] - hs, &ch))
            / (2.0 * hs);
        let c = channel_curvature(theta[0], &ch);
        worst = worst.max((c - fd).abs() / fd.abs().max(1e-2));
    }
    Check::new(
        "curvatures_vs_differentiated_scores",
        worst <= 1e-4,
        format!("worst relative deviation {worst:.3e} (tolerance 1e-4)"),
    )
}

fn check_regularity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = random_theta(&mut rng);
        let v: f64 = rng.random_range(0.05..1.5);
        let mut sum = [0.0f64; 3];
        for &(x1, x2) in OUTCOMES.iter() {
            let o = crate::recovery::likelihood::outcome_prob(theta, v, v, x1, x2);
            let g = sample_gradient(theta, v, v, x1, x2);
            for i in 0..3 {
                sum[i] += o * g[i];
            }
        }
        for s in sum {
            worst = worst.max(s.abs());
        }
    }
    Check::new(
        "outcome_weighted_score_is_zero",
        worst <= 1e-12,
        format!("largest |E[score]| component {worst:.3e} (tolerance 1e-12)"),
    )
}

fn check_orthant_oracle() -> Check {
    let ks = [-2.0, -0.5, 0.0, 0.8, 2.5];
    let rhos = [-0.99, -0.925, -0.75, -0.3, 0.0, 0.3, 0.75, 0.9, 0.925, 0.99];
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    for &r in &rhos {
        for &k1 in &ks {
            for &k2 in &ks {
                cases.push((k1, k2, r));
            }
        }
    }
    let devs: Vec<f64> = cases
        .par_iter()
        .map(|&(k1, k2, r)| {
            let oracle = orthant_quadrature_oracle(k1, k2, r, 1e-11);
            (bvn_orthant_raw(k1, k2, r) - oracle).abs()
        })
        .collect();
    for d in devs {
        worst = worst.max(d);
    }
    Check::new(
        "orthant_vs_quadrature_oracle",
        worst <= 1e-8,
        format!("largest absolute deviation {worst:.3e} over {} points (tolerance 1e-8)", cases.len()),
    )
}

fn check_price_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9817);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k1: f64 = rng.random_range(-2.0..2.0);
        let k2: f64 = rng.random_range(-2.0..2.0);
        let r: f64 = rng.random_range(-0.9..0.9);
        let h = 1e-5;
        let fd = (bvn_orthant_raw(k1, k2, r + h) - bvn_orthant_raw(k1, k2, r - h)) / (2.0 * h);
        let f = bvn_pdf_raw(k1, k2, r);
        worst = worst.max((fd - f).abs() / f.abs().max(1e-12));
    }
    Check::new(
        "price_identity",
        worst <= 1e-5,
        format!("worst relative deviation of d(orthant)/d(rho) from the density: {worst:.3e}"),
    )
}

fn check_moments_brute_force() -> Check {
    let mut worst = 0.0f64;
    for &n in &[2u64, 5, 10, 17, 30] {
        for pi in 0..=10 {
            let p = pi as f64 / 10.0;
            // Binomial pmf by the multiplicative recurrence.
            let mut pmf = vec![0.0f64; (n + 1) as usize];
            pmf[0] = (1.0 - p).powi(n as i32);
            for k in 1..=n as usize {
                pmf[k] = if p == 1.0 {
                    if k == n as usize { 1.0 } else { 0.0 }
                } else {
                    pmf[k - 1] * ((n as usize - k + 1) as f64) / (k as f64) * p / (1.0 - p)
                };
            }
            for c in 1..=4usize {
                let mut brute = 0.0;
                for (k, w) in pmf.iter().enumerate() {
                    brute += w * (k as f64 / n as f64).powi(c as i32);
                }
                let lemma = binomial_proportion_moment(p, n, c);
                worst = worst.max((lemma - brute).abs());
            }
        }
    }
    Check::new(
        "binomial_moments_vs_enumeration",
        worst <= 1e-13,
        format!("largest absolute deviation {worst:.3e} over n <= 30 (tolerance 1e-13)"),
    )
}

/// Gap between the two-stage and joint estimates shrinks like n^{-1/2}
/// with the number of sub-intervals held fixed.
fn check_joint_gap_scaling(seed: u64) -> Check {
    let params = PairParams::from_rho(0.25, 0.6, 0.5).unwrap();
    let levels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let joint_opts = JointOptions {
        max_iter: 2000,
        ..JointOptions::default()
    };
    let newton_opts = NewtonOptions::default();
    let mut medians = Vec::new();
    for &n_per in &[100usize, 1000, 10_000] {
        let n = 10 * n_per;
        let sched = ThresholdSchedule::staircase(levels.clone(), 2, n).unwrap();
        let gaps: Vec<f64> = (0..200u64)
            .into_par_iter()
            .filter_map(|trial| {
                let s = seed.wrapping_add(trial).wrapping_add(n as u64);
                let y = sample_pair(&params, n, s);
                let batch = quantize_real(&y, &sched, s).ok()?;
                let opts = RecoveryOptions::new(Method::TimeVarying);
                let f1 = recover_sigma(&batch, 0, &opts).ok()?;
                let f2 = recover_sigma(&batch, 1, &opts).ok()?;
                let cells = crate::recovery::likelihood::pair_cells(&batch, 0, 1).ok()?;
                let f12 =
                    mle_sigma12_newton(&cells, f1.value, f2.value, 0.0, &newton_opts).ok()?;
                let joint = joint_mle(&cells, [f1.value, f2.value, f12.value], &joint_opts);
                if joint.line_search_failed {
                    return None;
                }
                Some((joint.theta[0] - f1.value).abs())
            })
            .collect();
        if gaps.len() < 100 {
            return Check::new(
                "joint_gap_scaling",
                false,
                format!("only {} usable trials at n = {n_per}", gaps.len()),
            );
        }
        let mut sorted = gaps;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(sorted[sorted.len() / 2]);
    }
    let slope = (medians[2].ln() - medians[0].ln()) / ((10_000f64).ln() - (100f64).ln());
    Check::new(
        "joint_gap_scaling",
        (slope + 0.5).abs() <= 0.15,
        format!(
            "median gaps {:?} give log-log slope {slope:.3} (want -0.5 +/- 0.15)",
            medians
        ),
    )
}

fn check_zero_threshold_fim() -> Check {
    let independent = PairParams::new(0.5, 0.8, 0.0).unwrap();
    let sched = ThresholdSchedule::zero(2, 100).unwrap();
    let f0 = match fim(&independent, &sched) {
        Ok(f) => f,
        Err(e) => return Check::new("zero_threshold_fim_rank", false, e.to_string()),
    };
    let entries_zero = f0[(0, 0)].abs() <= 1e-14 && f0[(1, 1)].abs() <= 1e-14;
    let correlated = PairParams::from_rho(0.5, 0.8, 0.5).unwrap();
    let f1 = match fim(&correlated, &sched) {
        Ok(f) => f,
        Err(e) => return Check::new("zero_threshold_fim_rank", false, e.to_string()),
    };
    let eig = nalgebra::SymmetricEigen::new(f1);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let singular = min <= 1e-12 * max;
    Check::new(
        "zero_threshold_fim_rank",
        entries_zero && singular,
        format!(
            "scale entries ({:.1e}, {:.1e}); correlated-case eigenvalue ratio {:.1e}",
            f0[(0, 0)],
            f0[(1, 1)],
            min / max
        ),
    )
}

fn check_outcome_sum(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let theta = random_theta(&mut rng);
        let v1: f64 = rng.random_range(-1.0..1.5);
        let v2: f64 = rng.random_range(-1.0..1.5);
        let total: f64 = OUTCOMES
            .iter()
            .map(|&(x1, x2)| crate::recovery::likelihood::outcome_prob(theta, v1, v2, x1, x2))
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    Check::new(
        "outcome_probabilities_sum_to_one",
        worst <= 1e-12,
        format!("largest |sum - 1| = {worst:.3e} (tolerance 1e-12)"),
    )
}

fn check_g_antisymmetry(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a6a);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k1: f64 = rng.random_range(-2.5..2.5);
        let k2: f64 = rng.random_range(-2.5..2.5);
        let r: f64 = rng.random_range(-0.95..0.95);
        let a = crate::gauss::g_kernel_raw(k1, k2, r);
        let b = crate::gauss::g_kernel_raw(-k1, k2, -r);
        worst = worst.max((a + b).abs());
    }
    Check::new(
        "g_kernel_antisymmetry",
        worst <= 1e-12,
        format!("largest |g(k1,k2,r) + g(-k1,k2,-r)| = {worst:.3e}"),
    )
}

fn check_score_identities_grouped(seed: u64) -> Check {
    // Analytic score and full gradient against finite differences of the
    // summed log-likelihood, on random grouped data with distinct
    // per-channel thresholds.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x900d);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = random_theta(&mut rng);
        let cells: Vec<PairCell> = (0..3)
            .map(|_| PairCell {
                v1: rng.random_range(0.05..1.2),
                v2: rng.random_range(0.05..1.2),
                counts: [
                    rng.random_range(1.0..40.0),
                    rng.random_range(1.0..40.0),
                    rng.random_range(1.0..40.0),
                    rng.random_range(1.0..40.0),
                ],
            })
            .collect();
        let g = crate::recovery::likelihood::joint_gradient(theta, &cells);
        for i in 0..3 {
            let h = 1e-5 * theta[i].abs().max(0.05);
            let fd = central_diff5(|t| pair_loglik(t, &cells), theta, i, h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1e-2));
        }
        let s12 = pair_score_sigma12(theta, &cells);
        worst = worst.max((s12 - g[2]).abs() / g[2].abs().max(1e-9));
    }
    Check::new(
        "grouped_gradient_identities",
        worst <= 1e-5,
        format!("worst relative deviation {worst:.3e}"),
    )
}

fn check_sigma_solver_sanity(seed: u64) -> Check {
    // The per-channel Newton stage must reproduce the closed form on a
    // constant schedule.
    let params = PairParams::new(0.6, 1.0, 0.0).unwrap();
    let n = 4000;
    let sched = ThresholdSchedule::constant(0.5, 2, n).unwrap();
    let y = sample_pair(&params, n, seed);
    let batch = match quantize_real(&y, &sched, seed) {
        Ok(b) => b,
        Err(e) => return Check::new("newton_matches_closed_form", false, e.to_string()),
    };
    let cells = match crate::recovery::likelihood::channel_cells(&batch, 0) {
        Ok(c) => c,
        Err(e) => return Check::new("newton_matches_closed_form", false, e.to_string()),
    };
    let closed = match crate::recovery::const_sigma(cells[0].plus, cells[0].total(), 0.5) {
        Ok(s) => s,
        Err(e) => return Check::new("newton_matches_closed_form", false, e.to_string()),
    };
    let fit = match mle_sigma_newton(&cells, 0.4, &NewtonOptions::default()) {
        Ok(f) => f,
        Err(e) => return Check::new("newton_matches_closed_form", false, e.to_string()),
    };
    let dev = (fit.value - closed).abs();
    Check::new(
        "newton_matches_closed_form",
        dev <= 1e-8,
        format!("|newton - closed form| = {dev:.3e} (tolerance 1e-8)"),
    )
}

/// Run the whole suite.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check_scores_fd(seed),
        check_score_identities_grouped(seed),
        check_curvatures_fd(seed),
        check_regularity(seed),
        check_orthant_oracle(),
        check_price_identity(seed),
        check_moments_brute_force(),
        check_g_antisymmetry(seed),
        check_outcome_sum(seed),
        check_zero_threshold_fim(),
        check_sigma_solver_sanity(seed),
        check_joint_gap_scaling(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn oracle_agrees_on_known_point() {
        let got = orthant_quadrature_oracle(0.0, 0.0, 0.5, 1e-11);
        assert_abs_diff_eq!(got, 1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn fast_checks_pass() {
        for c in [
            check_scores_fd(7),
            check_regularity(7),
            check_moments_brute_force(),
            check_g_antisymmetry(7),
            check_outcome_sum(7),
        ] {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
