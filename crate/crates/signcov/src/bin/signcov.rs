//! Batch command-line front end.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numerical
//! failure, 3 selftest violation.

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use signcov::bench::{self, ExperimentConfig};
use signcov::doa::{doa_pipeline, DoaPipelineConfig};
use signcov::quantizer::{quantize_real, sample_gaussian, ThresholdSchedule};
use signcov::recovery::{recover_complex, recover_matrix, Method, RecoveryOptions};
use signcov::theory::predict_mse;
use signcov::{batchio, Error, PairParams};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "signcov", version, about = "Covariance recovery from one-bit samples")]
struct Cli {
    /// Rayon worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a covariance matrix from a batch file or synthetic data.
    Recover(RecoverArgs),
    /// Closed-form error prediction for a parameter point and schedule.
    Predict(PredictArgs),
    /// Run a Monte Carlo experiment and write CSV.
    Bench(BenchArgs),
    /// Direction-of-arrival demo on a uniform linear array.
    Doa(DoaArgs),
    /// Run the numerical self-verification suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RecoverArgs {
    /// JSON config for synthetic generation (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Serialized one-bit batch (.scob); overrides synthetic generation.
    #[arg(long)]
    batch: Option<PathBuf>,
    /// arcsine | constant | time_varying | time_varying_joint
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply the PSD projection to the assembled matrix.
    #[arg(long)]
    psd: bool,
    /// Output path (CSV); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// JSON file with pair parameters {"sigma1":..,"sigma2":..,"sigma12":..}.
    #[arg(long)]
    config: PathBuf,
    /// JSON file with the threshold schedule.
    #[arg(long)]
    schedule: PathBuf,
    /// Output path (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Builtin experiment: fig1 fig2 fig3 fig4 fig5 table1.
    #[arg(long)]
    builtin: Option<String>,
    /// Custom experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value overrides for n, trials, base_seed, name.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DoaArgs {
    /// Custom pipeline config (JSON); the reference scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshots: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Synthetic-data description for `recover`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecoverConfig {
    cov: Vec<Vec<f64>>,
    n: usize,
    schedule: ThresholdSchedule,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

fn parse_method(name: &str) -> Result<Method, Error> {
    match name {
        "arcsine" => Ok(Method::Arcsine),
        "constant" => Ok(Method::Constant),
        "time_varying" => Ok(Method::TimeVarying),
        "time_varying_joint" => Ok(Method::TimeVaryingJoint),
        other => Err(Error::Usage(format!(
            "unknown method '{other}' (expected arcsine | constant | time_varying | time_varying_joint)"
        ))),
    }
}

fn write_or_stdout(path: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, content)?;
            std::fs::rename(&tmp, p)?;
        }
        None => {
            std::io::stdout().write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run_recover(args: &RecoverArgs) -> Result<(), Error> {
    let (batch, config_echo) = if let Some(batch_path) = &args.batch {
        let f = std::fs::File::open(batch_path)?;
        (
            batchio::read_batch(std::io::BufReader::new(f))?,
            format!("{{\"batch\":{:?}}}", batch_path),
        )
    } else {
        let config_path = args.config.as_ref().ok_or_else(|| {
            Error::Usage("recover needs --batch or --config".into())
        })?;
        let cfg: RecoverConfig = load_json(config_path)?;
        let m = cfg.cov.len();
        if m < 2 || cfg.cov.iter().any(|row| row.len() != m) {
            return Err(Error::Usage("cov must be a square matrix, M >= 2".into()));
        }
        let mut cov = nalgebra::DMatrix::zeros(m, m);
        for (i, row) in cfg.cov.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cov[(i, j)] = v;
            }
        }
        let seed = args.seed.or(cfg.seed).unwrap_or(1);
        let y = sample_gaussian(&cov, cfg.n, seed)?;
        let batch = quantize_real(&y, &cfg.schedule, seed)?;
        let echo = serde_json::json!({
            "cov": cfg.cov,
            "n": cfg.n,
            "schedule": cfg.schedule,
            "method": cfg.method,
            "seed": seed,
        })
        .to_string();
        (batch, echo)
    };

    let method_name = args
        .method
        .clone()
        .or_else(|| {
            args.config
                .as_ref()
                .and_then(|p| load_json::<RecoverConfig>(p).ok())
                .and_then(|c| c.method)
        })
        .unwrap_or_else(|| "time_varying".to_string());
    let mut opts = RecoveryOptions::new(parse_method(&method_name)?);
    opts.psd_projection = args.psd;

    let mut out = String::new();
    if batch.is_complex() {
        let est = recover_complex(&batch, &opts)?;
        out.push_str(&format!(
            "# config: {config_echo}\n# m={} method={} complex=true hermitized={} psd={}\n",
            est.matrix.nrows(),
            est.method.as_str(),
            est.hermitized,
            est.psd_projected
        ));
        for i in 0..est.matrix.nrows() {
            let row: Vec<String> = (0..est.matrix.ncols())
                .map(|j| {
                    let z = est.matrix[(i, j)];
                    format!("{}{}{}i", z.re, if z.im < 0.0 { "-" } else { "+" }, z.im.abs())
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    } else {
        let est = recover_matrix(&batch, &opts)?;
        out.push_str(&format!(
            "# config: {config_echo}\n# m={} method={} psd={} sigma12_bisection={} line_search_failed={} orthant_fallback={} dither_unshifted={}\n",
            est.matrix.nrows(),
            est.method.as_str(),
            est.psd_projected,
            est.flags.sigma12_bisection,
            est.flags.line_search_failed,
            est.flags.orthant_fallback,
            est.flags.dither_unshifted
        ));
        for i in 0..est.matrix.nrows() {
            let row: Vec<String> = (0..est.matrix.ncols())
                .map(|j| est.matrix[(i, j)].to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    write_or_stdout(&args.out, &out)
}

fn run_predict(args: &PredictArgs) -> Result<(), Error> {
    let params: PairParams = load_json(&args.config)?;
    let schedule: ThresholdSchedule = load_json(&args.schedule)?;
    let report = predict_mse(&params, &schedule)?;
    let doc = serde_json::json!({
        "config": { "params": params, "schedule": schedule },
        "report": report,
    });
    write_or_stdout(&args.out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn apply_override(cfg: &mut ExperimentConfig, kv: &str) -> Result<(), Error> {
    let (key, value) = kv
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{kv}' is not key=value")))?;
    match key {
        "n" => cfg.n = value.parse().map_err(|_| Error::Usage(format!("bad n '{value}'")))?,
        "trials" => {
            cfg.trials = value
                .parse()
                .map_err(|_| Error::Usage(format!("bad trials '{value}'")))?
        }
        "base_seed" => {
            cfg.base_seed = value
                .parse()
                .map_err(|_| Error::Usage(format!("bad base_seed '{value}'")))?
        }
        "name" => cfg.name = value.to_string(),
        other => return Err(Error::Usage(format!("unknown override key '{other}'"))),
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<(), Error> {
    let mut config = match (&args.builtin, &args.config) {
        (Some(name), None) => bench::builtin(name)
            .ok_or_else(|| Error::Usage(format!("unknown builtin '{name}'")))?,
        (None, Some(path)) => load_json::<ExperimentConfig>(path)?,
        _ => {
            return Err(Error::Usage(
                "bench needs exactly one of --builtin or --config".into(),
            ))
        }
    };
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(s) = args.seed {
        config.base_seed = s;
    }
    for kv in &args.overrides {
        apply_override(&mut config, kv)?;
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    let is_table1 = config.name == "table1";
    let outcome = if is_table1 {
        bench::table1(&config)?
    } else {
        bench::run(&config)?
    };
    if config.output.is_none() {
        let mut text = String::new();
        if let Some(g) = &outcome.gradients {
            text.push_str(&format!(
                "largest per-sample gradient: sigma1={} sigma2={} sigma12={}\n",
                g.sigma1, g.sigma2, g.sigma12
            ));
        }
        for r in &outcome.rows {
            text.push_str(&format!(
                "{:<20} sweep={:<8} {:<8} mse={:<12.6e} se={:<10.3e} ok={} failed={}{}\n",
                r.method,
                r.sweep.map_or("-".into(), |v| format!("{v}")),
                r.parameter,
                r.mse,
                r.se,
                r.trials_ok,
                r.trials_failed,
                r.theory_mse
                    .map_or(String::new(), |t| format!(" theory={t:.6e}")),
            ));
        }
        print!("{text}");
    }
    Ok(())
}

fn run_doa(args: &DoaArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => load_json::<DoaPipelineConfig>(path)?,
        None => DoaPipelineConfig::reference(),
    };
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(s) = args.seed {
        config.base_seed = s;
    }
    if let Some(n) = args.snapshots {
        config.scenario.snapshots = n;
    }
    if let Some(snr) = args.snr {
        config.scenario.snr_db = snr;
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    let report = doa_pipeline(&config)?;
    for (method, rmse, failures) in &report.rmse {
        println!(
            "{:<14} rmse_deg={:?} failures={}",
            method.as_str(),
            rmse.iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>(),
            failures
        );
    }
    Ok(())
}

fn run_selftest(args: &SelftestArgs) -> Result<bool, Error> {
    let checks = signcov::selftest::run_all(args.seed);
    let mut all_pass = true;
    for c in &checks {
        println!("{} {:<38} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        all_pass &= c.pass;
    }
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: could not configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Recover(a) => run_recover(a),
        Command::Predict(a) => run_predict(a),
        Command::Bench(a) => run_bench(a),
        Command::Doa(a) => run_doa(a),
        Command::Selftest(a) => {
            return match run_selftest(a) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(3),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Usage(_) | Error::Dimension(_) | Error::Format(_) | Error::Json(_)
                | Error::Io(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
