//! Seeded Monte Carlo experiment runner.
//!
//! A configuration names a parameter point (or a sweep), a set of
//! recovery methods with their threshold schedules, a sample size and a
//! trial count. Trial `i` draws its data from seed `base_seed + i`, so
//! every run is bit-reproducible; methods at the same sweep point share
//! the underlying Gaussian draws (paired comparisons). Failed trials are
//! excluded from the error averages and counted per row.
//!
//! Builtin configurations reproduce the reference studies:
//!
//! * `fig1`   constant-threshold sweep with Taylor predictions
//! * `fig2`   staircase vs constant-threshold sweep vs dither
//! * `fig3`   correlation sweep
//! * `fig4`   variance-unevenness sweep
//! * `fig5`   sample-size sweep with theory columns
//! * `table1` separate vs joint MLE with gradient diagnostics

use crate::derived_seed;
use crate::error::{Error, Result};
use crate::quantizer::{quantize_real, sample_pair, PairParams, ThresholdSchedule};
use crate::recovery::{recover_pair, Method, RecoveryOptions};
use crate::theory::{predict_mse, TheoryReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const PARAM_NAMES: [&str; 3] = ["sigma1", "sigma2", "sigma12"];

/// What varies across the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sweep {
    /// Single run at the configured parameters.
    None,
    /// The constant-threshold method is evaluated once per level.
    ConstantLevels { levels: Vec<f64> },
    /// Correlation sweep; sigma12 = rho * sigma1 * sigma2 per value.
    Rho { values: Vec<f64> },
    /// Unevenness sweep; sigma1 = base1 + delta, sigma2 = base2 - delta,
    /// correlation held at the configured value.
    Delta { values: Vec<f64> },
    /// Sample-size sweep.
    Samples { values: Vec<usize> },
}

/// One estimator entry of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    /// Staircase schedule, separate (two-stage) MLE.
    TimeVarying { levels: Vec<f64> },
    /// Staircase schedule, two-stage MLE plus joint refinement.
    TimeVaryingJoint { levels: Vec<f64> },
    /// Constant threshold, closed-form estimator. Under a
    /// `ConstantLevels` sweep the level is replaced by each sweep value.
    Constant { level: f64 },
    /// Constant threshold plus Gaussian dither of the given variance.
    Dither { level: f64, variance: f64 },
}

impl MethodSpec {
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::TimeVarying { .. } => "time_varying",
            MethodSpec::TimeVaryingJoint { .. } => "time_varying_joint",
            MethodSpec::Constant { .. } => "constant",
            MethodSpec::Dither { .. } => "dither",
        }
    }

    fn schedule(&self, n: usize) -> Result<ThresholdSchedule> {
        match self {
            MethodSpec::TimeVarying { levels } | MethodSpec::TimeVaryingJoint { levels } => {
                ThresholdSchedule::staircase(levels.clone(), 2, n)
            }
            MethodSpec::Constant { level } => ThresholdSchedule::constant(*level, 2, n),
            MethodSpec::Dither { level, variance } => {
                ThresholdSchedule::gaussian_dither(*level, variance.sqrt(), 2, n)
            }
        }
    }

    fn recovery_method(&self) -> Method {
        match self {
            MethodSpec::TimeVarying { .. } => Method::TimeVarying,
            MethodSpec::TimeVaryingJoint { .. } => Method::TimeVaryingJoint,
            MethodSpec::Constant { .. } | MethodSpec::Dither { .. } => Method::Constant,
        }
    }
}

/// Declarative description of a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma12: f64,
    pub sweep: Sweep,
    pub methods: Vec<MethodSpec>,
    pub n: usize,
    pub trials: usize,
    pub base_seed: u64,
    /// Attach theory predictions to every row.
    #[serde(default)]
    pub theory: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Usage("trials must be >= 1".into()));
        }
        PairParams::new(self.sigma1, self.sigma2, self.sigma12)?;
        match &self.sweep {
            Sweep::Rho { values } => {
                for &r in values {
                    PairParams::from_rho(self.sigma1, self.sigma2, r)?;
                }
            }
            Sweep::Delta { values } => {
                for &d in values {
                    self.params_at_delta(d)?;
                }
            }
            Sweep::Samples { values } if values.is_empty() => {
                return Err(Error::Usage("empty sample sweep".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn params_at_delta(&self, delta: f64) -> Result<PairParams> {
        let rho = self.sigma12 / (self.sigma1 * self.sigma2);
        PairParams::from_rho(self.sigma1 + delta, self.sigma2 - delta, rho)
    }
}

/// Aggregated result for one (method, sweep value, parameter) triple.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub sweep: Option<f64>,
    pub parameter: &'static str,
    pub true_value: f64,
    pub mse: f64,
    /// Standard error of the MSE estimate.
    pub se: f64,
    pub theory_mse: Option<f64>,
    pub ratio: Option<f64>,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub seed: u64,
}

/// Gradient diagnostics of the joint refinement (largest per-sample
/// average gradient magnitude seen across all trials and iterations).
#[derive(Debug, Clone, Serialize)]
pub struct GradientSummary {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma12: f64,
}

/// Output of a full experiment run.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<ResultRow>,
    /// Present for runs that include the joint method.
    pub gradients: Option<GradientSummary>,
}

fn run_method_point(
    params: &PairParams,
    spec: &MethodSpec,
    method_index: usize,
    n: usize,
    trials: usize,
    base_seed: u64,
) -> Result<Vec<ResultRow>> {
    let schedule = spec.schedule(n)?;
    let opts = RecoveryOptions::new(spec.recovery_method());
    let truth = params.theta();

    let results: Vec<Option<[f64; 3]>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let seed = base_seed + trial as u64;
            let y = sample_pair(params, n, seed);
            let qseed = derived_seed(seed, 0x51 + method_index as u64);
            let batch = quantize_real(&y, &schedule, qseed).ok()?;
            let est = recover_pair(&batch, 0, 1, &opts).ok()?;
            let theta = est.params.theta();
            let mut sq = [0.0; 3];
            for i in 0..3 {
                let e = theta[i] - truth[i];
                sq[i] = e * e;
            }
            Some(sq)
        })
        .collect();

    let theory = predict_mse(params, &schedule).ok();
    Ok(aggregate(
        spec.label(),
        truth,
        &results,
        base_seed,
        theory.as_ref(),
    ))
}

fn aggregate(
    method: &str,
    truth: [f64; 3],
    results: &[Option<[f64; 3]>],
    seed: u64,
    theory: Option<&TheoryReport>,
) -> Vec<ResultRow> {
    let ok: Vec<&[f64; 3]> = results.iter().filter_map(|r| r.as_ref()).collect();
    let failed = results.len() - ok.len();
    let n_ok = ok.len().max(1) as f64;
    let theory_mse = theory.map_or([None; 3], |t| {
        [t.mse_sigma1, t.mse_sigma2, t.mse_sigma12]
    });
    let mut rows = Vec::with_capacity(3);
    for i in 0..3 {
        let mean: f64 = ok.iter().map(|s| s[i]).sum::<f64>() / n_ok;
        let var: f64 = if ok.len() >= 2 {
            ok.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (n_ok - 1.0)
        } else {
            0.0
        };
        let se = (var / n_ok).sqrt();
        rows.push(ResultRow {
            method: method.to_string(),
            sweep: None,
            parameter: PARAM_NAMES[i],
            true_value: truth[i],
            mse: mean,
            se,
            theory_mse: theory_mse[i],
            ratio: theory_mse[i].map(|t| if t > 0.0 { mean / t } else { f64::NAN }),
            trials_ok: ok.len(),
            trials_failed: failed,
            seed,
        });
    }
    rows
}

fn expand_points(config: &ExperimentConfig) -> Result<Vec<(Option<f64>, PairParams, usize, Vec<MethodSpec>)>> {
    let base = PairParams::new(config.sigma1, config.sigma2, config.sigma12)?;
    let points = match &config.sweep {
        Sweep::None => vec![(None, base, config.n, config.methods.clone())],
        Sweep::ConstantLevels { levels } => {
            // Non-constant methods run once (no sweep value); the constant
            // method runs per level.
            let mut pts = Vec::new();
            let fixed: Vec<MethodSpec> = config
                .methods
                .iter()
                .filter(|m| !matches!(m, MethodSpec::Constant { .. }))
                .cloned()
                .collect();
            if !fixed.is_empty() {
                pts.push((None, base, config.n, fixed));
            }
            if config
                .methods
                .iter()
                .any(|m| matches!(m, MethodSpec::Constant { .. }))
            {
                for &v in levels {
                    pts.push((
                        Some(v),
                        base,
                        config.n,
                        vec![MethodSpec::Constant { level: v }],
                    ));
                }
            }
            pts
        }
        Sweep::Rho { values } => values
            .iter()
            .map(|&r| {
                PairParams::from_rho(config.sigma1, config.sigma2, r)
                    .map(|p| (Some(r), p, config.n, config.methods.clone()))
            })
            .collect::<Result<Vec<_>>>()?,
        Sweep::Delta { values } => values
            .iter()
            .map(|&d| {
                config
                    .params_at_delta(d)
                    .map(|p| (Some(d), p, config.n, config.methods.clone()))
            })
            .collect::<Result<Vec<_>>>()?,
        Sweep::Samples { values } => values
            .iter()
            .map(|&n| (Some(n as f64), base, n, config.methods.clone()))
            .collect(),
    };
    Ok(points)
}

/// Run an experiment. Writes CSV when the config names an output path.
pub fn run(config: &ExperimentConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let mut rows = Vec::new();
    for (sweep_value, params, n, methods) in expand_points(config)? {
        for (mi, spec) in methods.iter().enumerate() {
            let mut point_rows =
                run_method_point(&params, spec, mi, n, config.trials, config.base_seed)?;
            for r in &mut point_rows {
                r.sweep = sweep_value;
            }
            rows.extend(point_rows);
        }
    }
    if !config.theory {
        for r in &mut rows {
            r.theory_mse = None;
            r.ratio = None;
        }
    }
    let outcome = BenchOutcome {
        rows,
        gradients: None,
    };
    if let Some(path) = &config.output {
        write_csv(config, &outcome, path)?;
    }
    Ok(outcome)
}

/// Run an experiment with theory columns attached regardless of the
/// config flag.
pub fn compare_theory(config: &ExperimentConfig) -> Result<BenchOutcome> {
    let mut cfg = config.clone();
    cfg.theory = true;
    run(&cfg)
}

/// Separate vs joint comparison with gradient diagnostics. The config's
/// methods are ignored; both MLE variants run on shared data.
pub fn table1(config: &ExperimentConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let params = PairParams::new(config.sigma1, config.sigma2, config.sigma12)?;
    let levels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let schedule = ThresholdSchedule::staircase(levels, 2, config.n)?;
    let truth = params.theta();
    let n = config.n as f64;

    struct T1 {
        sep: Option<[f64; 3]>,
        joint: Option<[f64; 3]>,
        max_grad: [f64; 3],
    }

    let results: Vec<T1> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = config.base_seed + trial as u64;
            let y = sample_pair(&params, config.n, seed);
            let batch = match quantize_real(&y, &schedule, seed) {
                Ok(b) => b,
                Err(_) => {
                    return T1 {
                        sep: None,
                        joint: None,
                        max_grad: [0.0; 3],
                    }
                }
            };
            let opts = RecoveryOptions::new(Method::TimeVarying);
            let sep = match recover_pair(&batch, 0, 1, &opts) {
                Ok(e) => e,
                Err(_) => {
                    return T1 {
                        sep: None,
                        joint: None,
                        max_grad: [0.0; 3],
                    }
                }
            };
            let cells = match crate::recovery::likelihood::pair_cells(&batch, 0, 1) {
                Ok(c) => c,
                Err(_) => {
                    return T1 {
                        sep: None,
                        joint: None,
                        max_grad: [0.0; 3],
                    }
                }
            };
            let joint = crate::recovery::joint_mle(&cells, sep.params.theta(), &opts.joint);
            let sq = |theta: [f64; 3]| {
                let mut s = [0.0; 3];
                for i in 0..3 {
                    let e = theta[i] - truth[i];
                    s[i] = e * e;
                }
                s
            };
            let joint_theta = if joint.line_search_failed {
                sep.params.theta()
            } else {
                joint.theta
            };
            T1 {
                sep: Some(sq(sep.params.theta())),
                joint: Some(sq(joint_theta)),
                max_grad: joint.max_abs_gradient,
            }
        })
        .collect();

    let sep: Vec<Option<[f64; 3]>> = results.iter().map(|t| t.sep).collect();
    let joint: Vec<Option<[f64; 3]>> = results.iter().map(|t| t.joint).collect();

    let theory = predict_mse(&params, &schedule).ok();
    let mut rows = aggregate("time_varying", truth, &sep, config.base_seed, theory.as_ref());
    rows.extend(aggregate(
        "time_varying_joint",
        truth,
        &joint,
        config.base_seed,
        theory.as_ref(),
    ));
    if !config.theory {
        for r in &mut rows {
            r.theory_mse = None;
            r.ratio = None;
        }
    }

    // Largest per-sample average gradient magnitudes over all trials.
    let mut max_grad = [0.0f64; 3];
    for t in &results {
        for i in 0..3 {
            max_grad[i] = max_grad[i].max(t.max_grad[i] / n);
        }
    }
    let outcome = BenchOutcome {
        rows,
        gradients: Some(GradientSummary {
            sigma1: max_grad[0],
            sigma2: max_grad[1],
            sigma12: max_grad[2],
        }),
    };
    if let Some(path) = &config.output {
        write_csv(config, &outcome, path)?;
    }
    Ok(outcome)
}

/// Builtin experiment configurations.
pub fn builtin(name: &str) -> Option<ExperimentConfig> {
    let staircase: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let config = match name {
        "fig1" => ExperimentConfig {
            name: "fig1".into(),
            sigma1: 0.25,
            sigma2: 0.6,
            sigma12: -0.08,
            sweep: Sweep::ConstantLevels {
                levels: (2..=32).map(|i| 0.05 * i as f64).collect(),
            },
            methods: vec![MethodSpec::Constant { level: 0.0 }],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: true,
            output: None,
        },
        "fig2" => ExperimentConfig {
            name: "fig2".into(),
            sigma1: 0.25,
            sigma2: 0.6,
            sigma12: -0.08,
            sweep: Sweep::ConstantLevels {
                levels: (1..=10).map(|i| 0.1 * i as f64).collect(),
            },
            methods: vec![
                MethodSpec::TimeVarying {
                    levels: staircase.clone(),
                },
                MethodSpec::Constant { level: 0.0 },
                MethodSpec::Dither {
                    level: 0.5,
                    variance: 0.15,
                },
            ],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: false,
            output: None,
        },
        "fig3" => ExperimentConfig {
            name: "fig3".into(),
            sigma1: 0.25,
            sigma2: 0.6,
            sigma12: 0.0,
            sweep: Sweep::Rho {
                values: (0..20).map(|i| -0.95 + 0.1 * i as f64).collect(),
            },
            methods: vec![
                MethodSpec::TimeVarying {
                    levels: staircase.clone(),
                },
                MethodSpec::Constant { level: 0.5 },
                MethodSpec::Dither {
                    level: 0.5,
                    variance: 0.15,
                },
            ],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: false,
            output: None,
        },
        "fig4" => ExperimentConfig {
            name: "fig4".into(),
            sigma1: 0.6,
            sigma2: 0.6,
            sigma12: 0.18, // rho = 0.5
            sweep: Sweep::Delta {
                values: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            },
            methods: vec![
                MethodSpec::TimeVarying {
                    levels: staircase.clone(),
                },
                MethodSpec::Constant { level: 0.5 },
                MethodSpec::Dither {
                    level: 0.5,
                    variance: 0.15,
                },
            ],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: false,
            output: None,
        },
        "fig5" => ExperimentConfig {
            name: "fig5".into(),
            sigma1: 0.8,
            sigma2: 0.9,
            sigma12: 0.25,
            sweep: Sweep::Samples {
                values: vec![100, 1000, 10_000],
            },
            methods: vec![
                MethodSpec::TimeVarying { levels: staircase },
                MethodSpec::Constant { level: 0.5 },
            ],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: true,
            output: None,
        },
        "table1" => ExperimentConfig {
            name: "table1".into(),
            sigma1: 0.25,
            sigma2: 0.6,
            sigma12: 0.075, // rho = 0.5
            sweep: Sweep::None,
            methods: vec![],
            n: 1000,
            trials: 10_000,
            base_seed: 1,
            theory: true,
            output: None,
        },
        _ => return None,
    };
    Some(config)
}

/// Write rows as CSV, atomically (write to `<path>.tmp`, then rename).
/// The first line echoes the fully resolved configuration.
pub fn write_csv(config: &ExperimentConfig, outcome: &BenchOutcome, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        writeln!(f, "# config: {}", serde_json::to_string(config)?)?;
        if let Some(g) = &outcome.gradients {
            writeln!(
                f,
                "# largest_gradient_per_sample: sigma1={} sigma2={} sigma12={}",
                g.sigma1, g.sigma2, g.sigma12
            )?;
        }
        writeln!(
            f,
            "method,sweep,parameter,true_value,mse,se,theory_mse,ratio,trials_ok,trials_failed,seed"
        )?;
        for r in &outcome.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.sweep.map_or(String::new(), |v| v.to_string()),
                r.parameter,
                r.true_value,
                r.mse,
                r.se,
                r.theory_mse.map_or(String::new(), |v| v.to_string()),
                r.ratio.map_or(String::new(), |v| v.to_string()),
                r.trials_ok,
                r.trials_failed,
                r.seed
            )?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(name: &str) -> ExperimentConfig {
        let mut c = builtin(name).unwrap();
        c.trials = 50;
        c
    }

    #[test]
    fn builtin_names() {
        for name in ["fig1", "fig2", "fig3", "fig4", "fig5", "table1"] {
            assert!(builtin(name).is_some(), "{name}");
        }
        assert!(builtin("fig9").is_none());
    }

    #[test]
    fn runs_are_reproducible() {
        let mut c = tiny("fig2");
        c.sweep = Sweep::ConstantLevels { levels: vec![0.4] };
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
            assert_eq!(x.se.to_bits(), y.se.to_bits());
        }
    }

    #[test]
    fn csv_is_bit_identical_across_runs() {
        let dir = std::env::temp_dir();
        let p1 = dir.join("signcov_bench_a.csv");
        let p2 = dir.join("signcov_bench_b.csv");
        let mut c = tiny("fig4");
        c.sweep = Sweep::Delta { values: vec![0.0, 0.2] };
        c.output = Some(p1.clone());
        run(&c).unwrap();
        c.output = Some(p2.clone());
        run(&c).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        // Only the output path differs between the two configs.
        let sa = String::from_utf8(a).unwrap();
        let sb = String::from_utf8(b).unwrap();
        let strip = |s: &str| {
            s.lines()
                .map(|l| if l.starts_with("# config:") { "" } else { l })
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&sa), strip(&sb));
        std::fs::remove_file(p1).ok();
        std::fs::remove_file(p2).ok();
    }

    #[test]
    fn table1_reports_gradients() {
        let mut c = tiny("table1");
        c.trials = 30;
        let out = table1(&c).unwrap();
        assert_eq!(out.rows.len(), 6);
        let g = out.gradients.unwrap();
        assert!(g.sigma1 >= 0.0 && g.sigma2 >= 0.0 && g.sigma12 >= 0.0);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let js = r#"{"name":"x","sigma1":0.5,"sigma2":0.5,"sigma12":0.0,
            "sweep":{"kind":"none"},"methods":[],"n":100,"trials":1,
            "base_seed":0,"bogus":1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(js).is_err());
    }
}
