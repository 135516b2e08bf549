//! `uvi`: simulate VAR(1) paths, run estimators, intervals and tests on stored paths, and execute
//! experiment configs.
//!
//! Exit codes: 0 success (statistical rejections included), 1 other operational failure,
//! 2 invalid flags or input, 3 assumption check failed, 4 singular moments, 5 optimizer budget,
//! 130 interrupted experiment (partial results written).

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use uvi_core::error::CoreError;
use uvi_core::estimators::{ivx_estimate, lag_augmented_estimate, ols_estimate, DEFAULT_IVX_BETA};
use uvi_core::inference::{
    la_interval, pr_test, project_ci, IntervalResult, PrMethod, PrTestOptions, PrTestResult, QuantileConfig, Region,
    RegionMethod, RegionSpec,
};
use uvi_core::model::{
    check_assumptions, construct_gamma_from_spectrum, equicorrelated_sigma, matrix_to_rows, simulate_var,
    staggered_spectrum, ErrorSpec, ModelParams, DEFAULT_ALPHA,
};
use uvi_core::montecarlo::{run_experiment, ExperimentConfig, RunControl};
use uvi_core::quantiles::EAM_REPLICATIONS;
use uvi_core::rng::{derive_seed, EAM, QUANTILE};
use uvi_eam::EamOptions;

#[derive(Parser)]
#[command(name = "uvi", version, about = "Uniformly valid inference for VAR(1) processes")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores. Results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a path and write it with a parameter sidecar.
    Simulate(SimulateArgs),
    /// Point estimates from a stored path.
    Estimate(EstimateArgs),
    /// Confidence interval for one coordinate of Γ.
    Ci(CiArgs),
    /// Bonferroni test of no predictability in the first coordinate.
    TestPr(TestPrArgs),
    /// Whether a candidate Γ₀ lies in a confidence region.
    RegionContains(RegionArgs),
    /// Run an experiment config; results are written next to it.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    n: usize,
    /// JSON matrix (array of rows or an object with a `gamma` field).
    #[arg(long, conflicts_with = "spectrum")]
    gamma_file: Option<PathBuf>,
    /// Real eigenvalues `1,0.98,…`, or `auto:staggered` (alias `auto:paper`) for `1 - n^{-1/(i-1)}`.
    #[arg(long)]
    spectrum: Option<String>,
    /// Seed of the random eigenbasis; defaults to --seed.
    #[arg(long)]
    basis_seed: Option<u64>,
    #[arg(long, conflicts_with = "sigma")]
    sigma_file: Option<PathBuf>,
    /// `equicorrelated` (½(I + 𝟙𝟙ᵀ)) or `identity`.
    #[arg(long)]
    sigma: Option<String>,
    /// Write even if the assumption check fails.
    #[arg(long)]
    force: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Ols,
    La,
    Ivx,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    path: PathBuf,
    #[arg(long, value_enum)]
    method: Estimator,
    #[arg(long, default_value_t = DEFAULT_IVX_BETA)]
    beta: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntervalMethod {
    B,
    Iv,
    La,
}

/// Simulation and optimizer budgets shared by the inference commands.
#[derive(Args)]
struct Budget {
    /// Replications per simulated critical value.
    #[arg(long, default_value_t = EAM_REPLICATIONS)]
    replications: usize,
    #[arg(long, default_value_t = 60)]
    max_iterations: usize,
    #[arg(long, default_value_t = DEFAULT_IVX_BETA)]
    beta: f64,
}

#[derive(Args)]
struct CiArgs {
    #[arg(long)]
    path: PathBuf,
    /// One-based `i,j`.
    #[arg(long)]
    coord: String,
    #[arg(long, value_enum)]
    method: IntervalMethod,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    budget: Budget,
}

#[derive(Args)]
struct TestPrArgs {
    #[arg(long)]
    path: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha2: f64,
    #[arg(long, value_enum)]
    method: IntervalMethod,
    #[command(flatten)]
    budget: Budget,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionKind {
    A,
    B,
    Iv,
}

#[derive(Args)]
struct RegionArgs {
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    gamma0_file: PathBuf,
    #[arg(long, value_enum)]
    method: RegionKind,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    budget: Budget,
}

#[derive(Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// Output directory; defaults to the config's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Failure {
    Core(CoreError),
    Code(u8, String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<u8, Failure>;

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::InvalidInput(_) | CoreError::Parse(_) | CoreError::Io(_) => 2,
        CoreError::AssumptionViolated(_) => 3,
        CoreError::SingularMoments(_) | CoreError::RankDeficient | CoreError::DegenerateReplications { .. } => 4,
        CoreError::OptimizerBudgetExhausted => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 || rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            eprintln!("error: invalid --threads {t}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Estimate(a) => estimate(&cli, a),
        Command::Ci(a) => ci(&cli, a),
        Command::TestPr(a) => test_pr(&cli, a),
        Command::RegionContains(a) => region_contains(&cli, a),
        Command::Experiment(a) => experiment(&cli, a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Code(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn emit(cli: &Cli, doc: &Value, human: impl FnOnce() -> String) {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(doc).expect("json"));
    } else {
        println!("{}", human());
    }
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn parse_spectrum(text: &str, d: usize, n: usize) -> Result<Vec<f64>, Failure> {
    if text == "auto:staggered" || text == "auto:paper" {
        return Ok(staggered_spectrum(d, n));
    }
    let values: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| Failure::Code(2, format!("cannot parse spectrum {text:?}")))?;
    if values.len() != d {
        return Err(Failure::Code(2, format!("spectrum has {} values for d = {d}", values.len())));
    }
    Ok(values)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    if a.d == 0 {
        return Err(Failure::Code(2, "--d must be positive".into()));
    }
    let sigma = match (&a.sigma_file, a.sigma.as_deref()) {
        (Some(f), _) => io::load_matrix(f, "sigma")?,
        (None, None | Some("equicorrelated")) => equicorrelated_sigma(a.d),
        (None, Some("identity")) => DMatrix::identity(a.d, a.d),
        (None, Some(other)) => return Err(Failure::Code(2, format!("unknown --sigma {other:?}"))),
    };
    let params = match (&a.gamma_file, &a.spectrum) {
        (Some(f), _) => ModelParams::new(io::load_matrix(f, "gamma")?, sigma)?,
        (None, Some(s)) => {
            let eig = parse_spectrum(s, a.d, a.n)?;
            let (gamma, spectrum) = construct_gamma_from_spectrum(&eig, a.basis_seed.unwrap_or(seed(cli)))?;
            ModelParams::new(gamma, sigma)?.with_spectrum(spectrum)?
        }
        (None, None) => return Err(Failure::Code(2, "one of --gamma-file or --spectrum is required".into())),
    };
    if params.dim() != a.d {
        return Err(Failure::Code(2, format!("gamma is {0}×{0} but --d = {1}", params.dim(), a.d)));
    }
    let report = check_assumptions(&params, DEFAULT_ALPHA)?;
    if !report.pass && !a.force {
        return Err(Failure::Core(CoreError::AssumptionViolated(report.failures().join("; "))));
    }
    let path = simulate_var(&params, a.n, &ErrorSpec::Gaussian, seed(cli))?;
    io::save_path(&path, &a.out)?;
    let sidecar = sidecar_path(&a.out);
    std::fs::write(&sidecar, params.to_json()).map_err(CoreError::from)?;
    let doc = json!({
        "path": a.out.display().to_string(),
        "params": sidecar.display().to_string(),
        "n": a.n,
        "d": a.d,
        "seed": seed(cli),
        "assumptions_pass": report.pass,
    });
    emit(cli, &doc, || format!("wrote {} and {}", a.out.display(), sidecar.display()));
    Ok(0)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".params.json");
    PathBuf::from(s)
}

fn rows(m: &DMatrix<f64>) -> Value {
    json!(matrix_to_rows(m))
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> CmdResult {
    let path = io::load_path(&a.path)?;
    let doc = match a.method {
        Estimator::Ols => {
            let fit = ols_estimate(&path)?;
            json!({"method": "ols", "n": path.n(), "d": path.d(), "estimate": rows(&fit.gamma_hat), "sigma_hat": rows(&fit.sigma_hat)})
        }
        Estimator::La => {
            let fit = lag_augmented_estimate(&path)?;
            json!({"method": "la", "n": path.n(), "d": path.d(), "estimate": rows(&fit.gamma_la),
                   "pi_hat": rows(&fit.pi_hat), "sigma_hat": rows(&fit.sigma_hat)})
        }
        Estimator::Ivx => {
            let fit = ivx_estimate(&path, a.beta)?;
            json!({"method": "ivx", "n": path.n(), "d": path.d(), "beta": a.beta, "estimate": rows(&fit.gamma_iv)})
        }
    };
    emit(cli, &doc, || {
        let m = &doc["estimate"];
        let lines: Vec<String> = m.as_array().unwrap().iter().map(|r| {
            r.as_array().unwrap().iter().map(|v| format!("{:>12.6}", v.as_f64().unwrap())).collect::<String>()
        }).collect();
        format!("{} estimate (n = {}):\n{}", doc["method"].as_str().unwrap(), path.n(), lines.join("\n"))
    });
    Ok(0)
}

fn quantile_config(cli: &Cli, b: &Budget) -> QuantileConfig {
    QuantileConfig { replications: b.replications, seed: derive_seed(seed(cli), QUANTILE, &[]), ivx_beta: b.beta, ..QuantileConfig::default() }
}

fn eam_options(cli: &Cli, b: &Budget) -> EamOptions {
    EamOptions { max_iterations: b.max_iterations, seed: derive_seed(seed(cli), EAM, &[]), ..EamOptions::default() }
}

fn parse_coord(text: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Code(2, format!("--coord must be i,j with one-based indices, got {text:?}"));
    let (i, j) = text.split_once(',').ok_or_else(bad)?;
    let i: usize = i.trim().parse().map_err(|_| bad())?;
    let j: usize = j.trim().parse().map_err(|_| bad())?;
    if i == 0 || j == 0 {
        return Err(bad());
    }
    Ok((i - 1, j - 1))
}

fn budget_code(flags: &[String]) -> u8 {
    if flags.iter().any(|f| f == "budget_exhausted") {
        5
    } else {
        0
    }
}

fn ci(cli: &Cli, a: &CiArgs) -> CmdResult {
    let coord = parse_coord(&a.coord)?;
    let path = io::load_path(&a.path)?;
    let res: IntervalResult = match a.method {
        IntervalMethod::La => la_interval(&path, coord, a.alpha)?,
        IntervalMethod::B | IntervalMethod::Iv => {
            let method = if matches!(a.method, IntervalMethod::B) { RegionMethod::B } else { RegionMethod::Iv };
            let spec = RegionSpec::new(method, a.alpha).with_quantile(quantile_config(cli, &a.budget));
            project_ci(&path, coord, &spec, &eam_options(cli, &a.budget))?
        }
    };
    let doc = res.to_json();
    emit(cli, &doc, || {
        format!(
            "{} {:.0}% interval for Γ[{},{}]: [{:.6}, {:.6}]  length {:.6}{}",
            res.method,
            100.0 * (1.0 - res.alpha),
            coord.0 + 1,
            coord.1 + 1,
            res.lower,
            res.upper,
            res.length(),
            flag_note(&res.flags)
        )
    });
    Ok(budget_code(&res.flags))
}

fn flag_note(flags: &[String]) -> String {
    if flags.is_empty() {
        String::new()
    } else {
        format!("  [{}]", flags.join(", "))
    }
}

fn test_pr(cli: &Cli, a: &TestPrArgs) -> CmdResult {
    let path = io::load_path(&a.path)?;
    let method = match a.method {
        IntervalMethod::B => PrMethod::B,
        IntervalMethod::Iv => PrMethod::Iv,
        IntervalMethod::La => PrMethod::La,
    };
    let opts = PrTestOptions { eam: eam_options(cli, &a.budget), quantile: quantile_config(cli, &a.budget) };
    let res: PrTestResult = pr_test(&path, a.alpha1, a.alpha2, method, &opts)?;
    let doc = res.to_json();
    emit(cli, &doc, || {
        format!(
            "{}: {} (statistic {:.4}, critical value {:.4}){}",
            res.method,
            if res.reject { "reject" } else { "do not reject" },
            res.inf_statistic,
            res.critical_value,
            flag_note(&res.flags)
        )
    });
    Ok(budget_code(&res.flags))
}

fn region_contains(cli: &Cli, a: &RegionArgs) -> CmdResult {
    let path = io::load_path(&a.path)?;
    let gamma0 = io::load_matrix(&a.gamma0_file, "gamma")?;
    let method = match a.method {
        RegionKind::A => RegionMethod::A,
        RegionKind::B => RegionMethod::B,
        RegionKind::Iv => RegionMethod::Iv,
    };
    let spec = RegionSpec::new(method, a.alpha).with_quantile(quantile_config(cli, &a.budget));
    let region = Region::new(&path, &spec)?;
    let statistic = region.statistic(&gamma0)?;
    let critical = region.critical_value(&gamma0)?;
    let contained = statistic <= critical;
    let doc = json!({
        "method": method.tag(),
        "alpha": a.alpha,
        "contained": contained,
        "statistic": statistic,
        "critical_value": critical,
    });
    emit(cli, &doc, || {
        format!(
            "{}: Γ₀ {} the region (statistic {statistic:.4}, critical value {critical:.4})",
            method.tag(),
            if contained { "is in" } else { "is not in" }
        )
    });
    Ok(0)
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> CmdResult {
    let text = io::read(&a.config)?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let control = Arc::new(RunControl::default());
    {
        let control = Arc::clone(&control);
        ctrlc::set_handler(move || control.cancel())
            .map_err(|e| Failure::Code(1, format!("cannot install interrupt handler: {e}")))?;
    }
    let result = run_experiment(&cfg, &control)?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.config.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let stem = a.config.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    let stem = if result.partial { format!("{stem}.partial") } else { stem.to_string() };
    let csv = dir.join(format!("{stem}.csv"));
    let json_file = dir.join(format!("{stem}.json"));
    let timing = dir.join(format!("{stem}.timing.json"));
    std::fs::write(&csv, result.to_csv()).map_err(CoreError::from)?;
    std::fs::write(&json_file, result.to_json()).map_err(CoreError::from)?;
    std::fs::write(&timing, result.timing_json()).map_err(CoreError::from)?;
    let doc = json!({
        "name": result.name,
        "partial": result.partial,
        "config_digest": result.config_digest,
        "master_seed": result.master_seed,
        "csv": csv.display().to_string(),
        "json": json_file.display().to_string(),
        "timing": timing.display().to_string(),
        "cells": result.cells.len(),
    });
    emit(cli, &doc, || result.table());
    Ok(if result.partial { 130 } else { 0 })
}
