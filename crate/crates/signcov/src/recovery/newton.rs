//! Safeguarded solvers for the time-varying-threshold MLE: per-channel
//! Newton for the scales, per-pair Newton for the covariance with scales
//! fixed, and a gradient ascent with backtracking line search for the
//! joint refinement.
//!
//! Newton steps are halved whenever the likelihood would decrease or the
//! iterate would leave its domain. Stopping tests use the scale-invariant
//! quantity |score| * scale, so the whole solve commutes exactly with a
//! rescaling of (data, thresholds) by a power of two.

use crate::error::{Error, Result};
use crate::recovery::likelihood::{
    channel_curvature, channel_loglik, channel_score, joint_gradient, pair_curvature_sigma12,
    pair_loglik, pair_score_sigma12, ChannelCell, PairCell,
};
use crate::gauss::CORR_CLAMP;

/// Options for the Newton stages.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Converged when |dL/dsigma| * sigma <= tol * N.
    pub tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 50,
            tol: 1e-9,
        }
    }
}

/// Options for the joint gradient refinement.
#[derive(Debug, Clone, Copy)]
pub struct JointOptions {
    pub max_iter: usize,
    /// Converged when the gradient infinity norm is <= tol * N.
    pub tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            max_iter: 500,
            tol: 1e-7,
            armijo: 1e-4,
        }
    }
}

/// Result of a scalar Newton stage.
#[derive(Debug, Clone, Copy)]
pub struct ScalarFit {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score: f64,
    pub used_bisection: bool,
}

const SIGMA_MAX: f64 = 1e9;
const SIGMA_MIN: f64 = 1e-12;

/// Maximum-likelihood scale of one channel under known per-sample
/// thresholds, by safeguarded Newton iteration.
pub fn mle_sigma_newton(
    cells: &[ChannelCell],
    init: f64,
    opts: &NewtonOptions,
) -> Result<ScalarFit> {
    if cells.iter().all(|c| c.v == 0.0) {
        return Err(Error::Unidentifiable(
            "all thresholds are zero; the scale does not enter the likelihood".into(),
        ));
    }
    if !(init.is_finite() && init > 0.0) {
        return Err(Error::Domain(format!("initial scale {init} must be positive")));
    }
    let n: f64 = cells.iter().map(|c| c.total()).sum();
    let tol = opts.tol * n;

    let mut sigma = init.clamp(SIGMA_MIN, SIGMA_MAX);
    let mut ll = channel_loglik(sigma, cells);
    let mut score = channel_score(sigma, cells);
    for iter in 0..opts.max_iter {
        if (score * sigma).abs() <= tol {
            return Ok(ScalarFit {
                value: sigma,
                iterations: iter,
                converged: true,
                score,
                used_bisection: false,
            });
        }
        let curv = channel_curvature(sigma, cells);
        let mut step = if curv < 0.0 {
            -score / curv
        } else {
            // Uphill relative step when the curvature is not usable.
            0.5 * sigma * score.signum()
        };
        // Tolerate float-resolution stagnation near the maximizer.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut accepted = false;
        for _ in 0..60 {
            let cand = sigma + step;
            if cand > SIGMA_MIN && cand < SIGMA_MAX && cand.is_finite() {
                let cand_ll = channel_loglik(cand, cells);
                if cand_ll >= ll - slack {
                    sigma = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            if (score * sigma).abs() <= 1e4 * tol {
                return Ok(ScalarFit {
                    value: sigma,
                    iterations: iter,
                    converged: true,
                    score,
                    used_bisection: false,
                });
            }
            // The likelihood cannot be improved along the Newton direction;
            // report the stall with the current iterate.
            return Err(Error::NonConvergence {
                iterations: iter,
                last: sigma,
                score,
            });
        }
        score = channel_score(sigma, cells);
    }
    if (score * sigma).abs() <= tol {
        return Ok(ScalarFit {
            value: sigma,
            iterations: opts.max_iter,
            converged: true,
            score,
            used_bisection: false,
        });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last: sigma,
        score,
    })
}

/// Maximum-likelihood covariance of a channel pair with the scales held
/// fixed. Newton with step halving; if the iterate insists on leaving the
/// admissible interval the monotone score is bisected instead.
pub fn mle_sigma12_newton(
    cells: &[PairCell],
    sigma1: f64,
    sigma2: f64,
    init: f64,
    opts: &NewtonOptions,
) -> Result<ScalarFit> {
    if sigma1 <= 0.0 || sigma2 <= 0.0 {
        return Err(Error::Domain("scales must be positive".into()));
    }
    let bound = sigma1 * sigma2 * (1.0 - CORR_CLAMP);
    let n: f64 = cells.iter().map(|c| c.total()).sum();
    let tol = opts.tol * n;
    let scale = sigma1 * sigma2;

    let theta = |s12: f64| [sigma1, sigma2, s12];
    let mut s12 = init.clamp(-bound, bound);
    let mut ll = pair_loglik(theta(s12), cells);
    let mut score = pair_score_sigma12(theta(s12), cells);
    let mut escapes = 0usize;

    for iter in 0..opts.max_iter {
        if (score * scale).abs() <= tol {
            return Ok(ScalarFit {
                value: s12,
                iterations: iter,
                converged: true,
                score,
                used_bisection: false,
            });
        }
        let curv = pair_curvature_sigma12(theta(s12), cells);
        let mut step = if curv < 0.0 {
            -score / curv
        } else {
            0.25 * (bound - s12.abs()).max(0.1 * scale) * score.signum()
        };
        if (s12 + step).abs() >= bound {
            escapes += 1;
            if escapes >= 2 {
                return grid_fallback_sigma12(cells, sigma1, sigma2, tol, iter);
            }
        }
        // Near the maximizer the likelihood improvement drops below float
        // resolution; a small relative slack keeps such steps acceptable.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut accepted = false;
        for _ in 0..60 {
            let cand = s12 + step;
            if cand.abs() < bound && cand.is_finite() {
                let cand_ll = pair_loglik(theta(cand), cells);
                if cand_ll >= ll - slack {
                    s12 = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // The iterate cannot move at float resolution. Accept it when
            // the score is already near the solver scale, otherwise fall
            // back to the global search.
            if (score * scale).abs() <= 1e4 * tol {
                return Ok(ScalarFit {
                    value: s12,
                    iterations: iter,
                    converged: true,
                    score,
                    used_bisection: false,
                });
            }
            return grid_fallback_sigma12(cells, sigma1, sigma2, tol, iter);
        }
        score = pair_score_sigma12(theta(s12), cells);
    }
    if (score * scale).abs() <= 1e4 * tol {
        return Ok(ScalarFit {
            value: s12,
            iterations: opts.max_iter,
            converged: true,
            score,
            used_bisection: false,
        });
    }
    grid_fallback_sigma12(cells, sigma1, sigma2, tol, opts.max_iter)
}

/// Global fallback: scan the score over an interior correlation grid
/// (the score and density underflow at the clamp edges, so endpoints are
/// never probed directly), bisect every down-crossing, and return the root
/// with the highest likelihood. Without a sign change the likelihood is
/// treated as monotone and the best grid point is returned, not converged.
fn grid_fallback_sigma12(
    cells: &[PairCell],
    sigma1: f64,
    sigma2: f64,
    tol: f64,
    prior_iterations: usize,
) -> Result<ScalarFit> {
    let theta = |s12: f64| [sigma1, sigma2, s12];
    let scale = sigma1 * sigma2;
    const GRID: usize = 64;
    const RHO_MAX: f64 = 1.0 - 1e-6;
    let mut iterations = prior_iterations;

    let mut best = (f64::NEG_INFINITY, 0.0); // (loglik, s12)
    let mut roots: Vec<f64> = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..=GRID {
        let rho = -RHO_MAX + 2.0 * RHO_MAX * k as f64 / GRID as f64;
        let s12 = rho * scale;
        let sc = pair_score_sigma12(theta(s12), cells);
        let l = pair_loglik(theta(s12), cells);
        if l > best.0 {
            best = (l, s12);
        }
        if let Some((pa, psc)) = prev {
            if psc > 0.0 && sc <= 0.0 {
                // Bisect the bracket [pa, s12] on the score.
                let (mut a, mut b) = (pa, s12);
                for _ in 0..200 {
                    iterations += 1;
                    let m = 0.5 * (a + b);
                    let fm = pair_score_sigma12(theta(m), cells);
                    if (fm * scale).abs() <= tol || (b - a) < 1e-15 * scale {
                        break;
                    }
                    if fm > 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
        }
        prev = Some((s12, sc));
    }
    if let Some(&s12) = roots.iter().max_by(|&&x, &&y| {
        pair_loglik(theta(x), cells)
            .partial_cmp(&pair_loglik(theta(y), cells))
            .unwrap()
    }) {
        let score = pair_score_sigma12(theta(s12), cells);
        return Ok(ScalarFit {
            value: s12,
            iterations,
            converged: true,
            score,
            used_bisection: true,
        });
    }
    Ok(ScalarFit {
        value: best.1,
        iterations,
        converged: false,
        score: pair_score_sigma12(theta(best.1), cells),
        used_bisection: true,
    })
}

/// Result of the joint gradient refinement.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub theta: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Largest |gradient component| observed across the iterations,
    /// including the initial point, per parameter.
    pub max_abs_gradient: [f64; 3],
}

fn in_domain(theta: [f64; 3]) -> bool {
    theta[0] > 0.0
        && theta[1] > 0.0
        && theta.iter().all(|t| t.is_finite())
        && theta[2].abs() < theta[0] * theta[1] * (1.0 - CORR_CLAMP)
}

/// Joint MLE of (sigma1, sigma2, sigma12) by gradient ascent with a
/// backtracking (Armijo) line search starting from the two-stage
/// estimates. A failed line search returns the initial point with the
/// failure flagged.
pub fn joint_mle(cells: &[PairCell], init: [f64; 3], opts: &JointOptions) -> JointFit {
    let n: f64 = cells.iter().map(|c| c.total()).sum();
    let tol = opts.tol * n;
    let mu0 = 1.0 / n;

    let mut theta = init;
    let mut ll = pair_loglik(theta, cells);
    let mut max_abs = [0.0_f64; 3];
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let g = joint_gradient(theta, cells);
        for i in 0..3 {
            max_abs[i] = max_abs[i].max(g[i].abs());
        }
        let gnorm_inf = g.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if gnorm_inf <= tol {
            return JointFit {
                theta,
                iterations,
                converged: true,
                line_search_failed: false,
                max_abs_gradient: max_abs,
            };
        }
        let g2: f64 = g.iter().map(|x| x * x).sum();
        let mut mu = mu0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = [theta[0] + mu * g[0], theta[1] + mu * g[1], theta[2] + mu * g[2]];
            if in_domain(cand) {
                let cand_ll = pair_loglik(cand, cells);
                if cand_ll >= ll + opts.armijo * mu * g2 {
                    theta = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            mu *= 0.5;
        }
        if !accepted {
            return JointFit {
                theta: init,
                iterations,
                converged: false,
                line_search_failed: true,
                max_abs_gradient: max_abs,
            };
        }
    }
    JointFit {
        theta,
        iterations,
        converged: false,
        line_search_failed: false,
        max_abs_gradient: max_abs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{quantize_real, sample_pair, PairParams, ThresholdSchedule};
    use crate::recovery::constant::const_sigma;
    use crate::recovery::likelihood::{channel_cells, pair_cells};
    use approx::assert_abs_diff_eq;

    fn staircase_batch(params: &PairParams, n: usize, seed: u64) -> crate::OneBitBatch {
        let levels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
        let sched = ThresholdSchedule::staircase(levels, 2, n).unwrap();
        let y = sample_pair(params, n, seed);
        quantize_real(&y, &sched, seed).unwrap()
    }

    #[test]
    fn all_zero_thresholds_are_unidentifiable() {
        let cells = vec![ChannelCell { v: 0.0, plus: 50.0, minus: 50.0 }];
        assert!(matches!(
            mle_sigma_newton(&cells, 1.0, &NewtonOptions::default()),
            Err(Error::Unidentifiable(_))
        ));
    }

    #[test]
    fn newton_agrees_with_closed_form_on_constant_threshold() {
        // A single threshold level makes the MLE the closed-form inverse.
        let p = PairParams::new(0.6, 1.0, 0.0).unwrap();
        let n = 2000;
        let sched = ThresholdSchedule::constant(0.5, 2, n).unwrap();
        let y = sample_pair(&p, n, 44);
        let batch = quantize_real(&y, &sched, 44).unwrap();
        let cells = channel_cells(&batch, 0).unwrap();
        let closed = const_sigma(cells[0].plus, cells[0].total(), 0.5).unwrap();
        let fit = mle_sigma_newton(&cells, 0.4, &NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.value, closed, epsilon = 1e-8);
    }

    #[test]
    fn newton_recovers_scale_on_staircase() {
        let p = PairParams::new(0.25, 0.6, 0.075).unwrap();
        let batch = staircase_batch(&p, 100_000, 7);
        let cells = channel_cells(&batch, 0).unwrap();
        let fit = mle_sigma_newton(&cells, 0.3, &NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.value, 0.25, epsilon = 0.01);
    }

    #[test]
    fn sigma12_score_vanishes_at_exact_proportions() {
        // Counts replaced by expected counts: the score at the true value
        // is identically zero.
        let p = PairParams::new(0.25, 0.6, 0.075).unwrap();
        let theta = p.theta();
        let levels = [0.2, 0.6, 1.0];
        let n_per = 1000.0;
        let cells: Vec<PairCell> = levels
            .iter()
            .map(|&v| {
                let mut counts = [0.0; 4];
                for (k, &(x1, x2)) in crate::recovery::likelihood::OUTCOMES.iter().enumerate() {
                    counts[k] =
                        n_per * crate::recovery::likelihood::outcome_prob(theta, v, v, x1, x2);
                }
                PairCell { v1: v, v2: v, counts }
            })
            .collect();
        let score = pair_score_sigma12(theta, &cells);
        assert_abs_diff_eq!(score, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn sigma12_newton_recovers_covariance() {
        let p = PairParams::new(0.25, 0.6, 0.075).unwrap();
        let batch = staircase_batch(&p, 200_000, 3);
        let cells = pair_cells(&batch, 0, 1).unwrap();
        let fit =
            mle_sigma12_newton(&cells, 0.25, 0.6, 0.0, &NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.value, 0.075, epsilon = 0.005);
    }

    #[test]
    fn sigma12_unbiased_at_independence() {
        let p = PairParams::new(1.0, 1.0, 0.0).unwrap();
        let batch = staircase_batch(&p, 1_000_000, 8);
        let cells = pair_cells(&batch, 0, 1).unwrap();
        let fit =
            mle_sigma12_newton(&cells, 1.0, 1.0, 0.05, &NewtonOptions::default()).unwrap();
        // 3 standard errors of the sigma12 estimate at this sample size.
        assert_abs_diff_eq!(fit.value, 0.0, epsilon = 0.005);
    }

    #[test]
    fn joint_refinement_stays_near_two_stage_estimates() {
        let p = PairParams::new(0.25, 0.6, 0.075).unwrap();
        let batch = staircase_batch(&p, 1000, 12);
        let cells = pair_cells(&batch, 0, 1).unwrap();
        let c0 = channel_cells(&batch, 0).unwrap();
        let c1 = channel_cells(&batch, 1).unwrap();
        let s1 = mle_sigma_newton(&c0, 0.3, &NewtonOptions::default()).unwrap().value;
        let s2 = mle_sigma_newton(&c1, 0.5, &NewtonOptions::default()).unwrap().value;
        let s12 = mle_sigma12_newton(&cells, s1, s2, 0.0, &NewtonOptions::default())
            .unwrap()
            .value;
        let fit = joint_mle(&cells, [s1, s2, s12], &JointOptions::default());
        assert!(!fit.line_search_failed || fit.theta == [s1, s2, s12]);
        assert_abs_diff_eq!(fit.theta[0], s1, epsilon = 0.05);
        assert_abs_diff_eq!(fit.theta[1], s2, epsilon = 0.05);
        assert_abs_diff_eq!(fit.theta[2], s12, epsilon = 0.02);
    }
}
