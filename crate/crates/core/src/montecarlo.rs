//! Declarative Monte Carlo harness: coverage tables for projected intervals and rejection-rate
//! curves for the predictive-regression tests.
//!
//! Every replication draws its randomness from `derive_seed(master, name, cell key, rep)`, so the
//! schedule (thread count, interruption, cell order) never changes a replication's outcome, and
//! aggregation is an ordered reduction by replication index.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uvi_eam::EamOptions;

use crate::error::{CoreError, Result};
use crate::estimators::DEFAULT_IVX_BETA;
use crate::inference::{
    la_interval, pr_test, project_ci, PrMethod, PrTestOptions, QuantileConfig, RegionMethod, RegionSpec,
};
use crate::model::{
    construct_gamma_from_spectrum, equicorrelated_sigma, simulate_var, staggered_spectrum, ErrorSpec, ModelParams,
};
use crate::quantiles::{EAM_REPLICATIONS, MIN_REPLICATIONS};
use crate::rng::{derive_seed, label_index};

pub const MIN_EXPERIMENT_REPLICATIONS: usize = 10;
/// A cell whose failed share exceeds this is reported as invalid.
pub const MAX_CELL_FAILURE_SHARE: f64 = 0.05;
pub const DESK_EAM_ITERATIONS: usize = 40;
const SEED_LABEL: &str = "experiment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CiTable,
    PrLevel,
    PrPower,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::CiTable => "ci_table",
            ExperimentKind::PrLevel => "pr_level",
            ExperimentKind::PrPower => "pr_power",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    B,
    Iv,
    La,
}

impl Method {
    pub fn tag(self, kind: ExperimentKind) -> &'static str {
        match (kind, self) {
            (ExperimentKind::CiTable, Method::B) => "ci_b",
            (ExperimentKind::CiTable, Method::Iv) => "ci_iv",
            (ExperimentKind::CiTable, Method::La) => "ci_la",
            (_, Method::B) => "phi_b",
            (_, Method::Iv) => "phi_iv",
            (_, Method::La) => "phi_la",
        }
    }
}

/// First-stage design for the predictor block `Γ̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Staggered spectrum with a random basis per replication.
    Mixed,
    /// `Γ̃ = I`.
    Nonstationary,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Mixed => "mixed",
            Regime::Nonstationary => "nonstationary",
        }
    }
}

fn default_regimes() -> Vec<Regime> {
    vec![Regime::Mixed, Regime::Nonstationary]
}
fn default_methods() -> Vec<Method> {
    vec![Method::B, Method::Iv, Method::La]
}
fn default_alpha() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    DEFAULT_IVX_BETA
}
fn default_b() -> usize {
    EAM_REPLICATIONS
}
fn default_eam_iterations() -> usize {
    DESK_EAM_ITERATIONS
}

/// Experiment description; the canonical file format is TOML.
///
/// `dims` is the full dimension `d`; for the predictive-regression designs the predictor block
/// has dimension `d - 1`. `pr_power` crosses `deltas` with every entry of `sample_sizes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Interval level for `ci_table`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha")]
    pub alpha1: f64,
    #[serde(default = "default_alpha")]
    pub alpha2: f64,
    #[serde(default = "default_beta")]
    pub ivx_beta: f64,
    #[serde(default = "default_b")]
    pub quantile_replications: usize,
    #[serde(default = "default_eam_iterations")]
    pub eam_max_iterations: usize,
    pub master_seed: u64,
    /// Worker count; absent means all cores. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidInput(m));
        if self.name.is_empty() {
            return bad("experiment name is empty".into());
        }
        if self.replications < MIN_EXPERIMENT_REPLICATIONS {
            return bad(format!("replications = {} below {MIN_EXPERIMENT_REPLICATIONS}", self.replications));
        }
        if self.dims.is_empty() || self.sample_sizes.is_empty() || self.methods.is_empty() {
            return bad("dims, sample_sizes and methods must be non-empty".into());
        }
        let min_d = if self.kind == ExperimentKind::CiTable { 1 } else { 2 };
        if let Some(d) = self.dims.iter().find(|&&d| d < min_d) {
            return bad(format!("dimension {d} too small for {}", self.kind.tag()));
        }
        if self.kind != ExperimentKind::CiTable && self.regimes.is_empty() {
            return bad("regimes must be non-empty".into());
        }
        match self.kind {
            ExperimentKind::PrPower if self.deltas.is_empty() => return bad("pr_power needs deltas".into()),
            ExperimentKind::CiTable | ExperimentKind::PrLevel if !self.deltas.is_empty() => {
                return bad(format!("deltas are only meaningful for pr_power, not {}", self.kind.tag()))
            }
            _ => {}
        }
        if self.deltas.iter().any(|v| !v.is_finite()) {
            return bad("non-finite delta".into());
        }
        let level_ok = |a: f64| a > 0.0 && a < 1.0;
        if !level_ok(self.alpha) || !level_ok(self.alpha1) || !level_ok(self.alpha2) || !level_ok(self.alpha1 + self.alpha2) {
            return bad("levels must lie in (0, 1)".into());
        }
        if !(self.ivx_beta > 0.0 && self.ivx_beta < 1.0) {
            return bad(format!("ivx_beta = {} outside (0, 1)", self.ivx_beta));
        }
        if self.quantile_replications < MIN_REPLICATIONS {
            return bad(format!("quantile_replications below {MIN_REPLICATIONS}"));
        }
        if self.eam_max_iterations == 0 || self.threads == Some(0) {
            return bad("eam_max_iterations and threads must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `threads` removed.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &d in &self.dims {
            for &n in &self.sample_sizes {
                match self.kind {
                    ExperimentKind::CiTable => out.push(Cell { d, n, regime: None, delta: None }),
                    ExperimentKind::PrLevel => {
                        for &r in &self.regimes {
                            out.push(Cell { d, n, regime: Some(r), delta: Some(0.0) });
                        }
                    }
                    ExperimentKind::PrPower => {
                        for &r in &self.regimes {
                            for &delta in &self.deltas {
                                out.push(Cell { d, n, regime: Some(r), delta: Some(delta) });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Seed of one replication; depends on the cell's coordinates, not its position.
    pub fn replication_seed(&self, cell: &Cell, rep: usize) -> u64 {
        let regime = cell.regime.map_or(0, |r| r as u64 + 1);
        let delta = cell.delta.map_or(u64::MAX, f64::to_bits);
        derive_seed(
            self.master_seed,
            SEED_LABEL,
            &[label_index(&self.name), cell.d as u64, cell.n as u64, regime, delta, rep as u64],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub d: usize,
    pub n: usize,
    pub regime: Option<Regime>,
    pub delta: Option<f64>,
}

/// Design of the interval experiment: `Γ = U⁻¹ΛU` with the staggered spectrum, `Σ = ½(I + 𝟙𝟙ᵀ)`.
pub fn ci_design(d: usize, n: usize, seed: u64) -> Result<ModelParams> {
    let (gamma, spectrum) = construct_gamma_from_spectrum(&staggered_spectrum(d, n), seed)?;
    ModelParams::new(gamma, equicorrelated_sigma(d))?.with_spectrum(spectrum)
}

/// Design of the predictive-regression experiments: first row `(0, δ𝟙ᵀ)`, first column zero below
/// the diagonal, predictor block `Γ̃` from the regime.
pub fn pr_design(d: usize, n: usize, regime: Regime, delta: f64, seed: u64) -> Result<ModelParams> {
    if d < 2 {
        return Err(CoreError::InvalidInput("predictive regression needs d >= 2".into()));
    }
    let k = d - 1;
    let tilde = match regime {
        Regime::Mixed => construct_gamma_from_spectrum(&staggered_spectrum(k, n), seed)?.0,
        Regime::Nonstationary => DMatrix::identity(k, k),
    };
    let mut gamma = DMatrix::zeros(d, d);
    for j in 1..d {
        gamma[(0, j)] = delta;
    }
    gamma.view_mut((1, 1), (k, k)).copy_from(&tilde);
    ModelParams::new(gamma, equicorrelated_sigma(d))
}

/// Result of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    /// `hit` is containment of the true coordinate for intervals and rejection for tests.
    Done { hit: bool, length: Option<f64>, budget_exhausted: bool },
    Failed { error: String },
    /// Not run because the experiment was interrupted.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub d: usize,
    pub n: usize,
    pub regime: Option<Regime>,
    pub delta: Option<f64>,
    pub method: String,
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    pub skipped: usize,
    /// Completed replications whose optimizer stopped on its budget (best-found result kept).
    pub budget_exhausted: usize,
    /// Coverage for intervals, rejection frequency for tests; over successful replications.
    pub rate: f64,
    pub median_length: Option<f64>,
    pub valid: bool,
    /// Per-replication indicator, `None` for failed or skipped replications.
    pub outcomes: Vec<Option<bool>>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub kind: ExperimentKind,
    pub config_digest: String,
    pub master_seed: u64,
    pub partial: bool,
    pub cells: Vec<CellRecord>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Cooperative cancellation; replications not yet started when it trips are skipped.
#[derive(Debug, Default)]
pub struct RunControl {
    pub cancel: AtomicBool,
}

impl RunControl {
    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

pub fn run_ci_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    expect_kind(cfg, ExperimentKind::CiTable)?;
    run_experiment(cfg, &RunControl::default())
}

pub fn run_pr_level_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    expect_kind(cfg, ExperimentKind::PrLevel)?;
    run_experiment(cfg, &RunControl::default())
}

pub fn run_pr_power_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    expect_kind(cfg, ExperimentKind::PrPower)?;
    run_experiment(cfg, &RunControl::default())
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(CoreError::InvalidInput(format!("expected a {} config, got {}", kind.tag(), cfg.kind.tag())));
    }
    Ok(())
}

/// Runs every (cell, replication) job on a pool of `cfg.threads` workers. A replication that
/// cannot run (for instance `n` too short for the estimators) is recorded as a failure.
pub fn run_experiment(cfg: &ExperimentConfig, control: &RunControl) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let cells = cfg.cells();
    let r = cfg.replications;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..r).map(move |k| (c, k))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CoreError::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<(Vec<Outcome>, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, k)| {
                if control.cancelled() {
                    return (vec![Outcome::Skipped; cfg.methods.len()], 0.0);
                }
                let t0 = Instant::now();
                let out = run_replication(cfg, &cells[c], cfg.replication_seed(&cells[c], k));
                (out, t0.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut records = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let block = &results[c * r..(c + 1) * r];
        let seconds: f64 = block.iter().map(|(_, s)| s).sum();
        for (m, method) in cfg.methods.iter().enumerate() {
            let outcomes: Vec<&Outcome> = block.iter().map(|(o, _)| &o[m]).collect();
            let mut rec = aggregate(cell, method.tag(cfg.kind), &outcomes);
            rec.seconds = seconds;
            records.push(rec);
        }
    }
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        kind: cfg.kind,
        config_digest: cfg.digest(),
        master_seed: cfg.master_seed,
        partial: control.cancelled(),
        cells: records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn aggregate(cell: &Cell, method: &str, outcomes: &[&Outcome]) -> CellRecord {
    let mut successes = 0;
    let mut failures = 0;
    let mut skipped = 0;
    let mut budget = 0;
    let mut hits = 0;
    let mut lengths = Vec::new();
    let mut flags = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Outcome::Done { hit, length, budget_exhausted } => {
                successes += 1;
                hits += usize::from(*hit);
                budget += usize::from(*budget_exhausted);
                lengths.extend(*length);
                flags.push(Some(*hit));
            }
            Outcome::Failed { .. } => {
                failures += 1;
                flags.push(None);
            }
            Outcome::Skipped => {
                skipped += 1;
                flags.push(None);
            }
        }
    }
    let attempted = successes + failures;
    let rate = if successes > 0 { hits as f64 / successes as f64 } else { f64::NAN };
    CellRecord {
        d: cell.d,
        n: cell.n,
        regime: cell.regime,
        delta: cell.delta,
        method: method.to_string(),
        replications: outcomes.len(),
        successes,
        failures,
        skipped,
        budget_exhausted: budget,
        rate,
        median_length: median(&mut lengths),
        valid: successes > 0 && (failures as f64) <= MAX_CELL_FAILURE_SHARE * attempted as f64,
        outcomes: flags,
        seconds: 0.0,
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn quantile_config(cfg: &ExperimentConfig, seed: u64) -> QuantileConfig {
    QuantileConfig {
        replications: cfg.quantile_replications,
        seed: derive_seed(seed, crate::rng::QUANTILE, &[]),
        ivx_beta: cfg.ivx_beta,
        ..QuantileConfig::default()
    }
}

fn eam_options(cfg: &ExperimentConfig, seed: u64) -> EamOptions {
    EamOptions { max_iterations: cfg.eam_max_iterations, seed: derive_seed(seed, crate::rng::EAM, &[]), ..EamOptions::default() }
}

/// All configured methods on one simulated sample.
pub fn run_replication(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Vec<Outcome> {
    let fail = |e: CoreError| vec![Outcome::Failed { error: e.to_string() }; cfg.methods.len()];
    let dgp_seed = derive_seed(seed, crate::rng::DGP, &[]);
    let params = match cfg.kind {
        ExperimentKind::CiTable => ci_design(cell.d, cell.n, dgp_seed),
        _ => pr_design(cell.d, cell.n, cell.regime.unwrap_or(Regime::Mixed), cell.delta.unwrap_or(0.0), dgp_seed),
    };
    let path = match params.and_then(|p| simulate_var(&p, cell.n, &ErrorSpec::Gaussian, seed).map(|x| (p, x))) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let (params, path) = path;
    let qcfg = quantile_config(cfg, seed);
    let eam = eam_options(cfg, seed);
    cfg.methods
        .iter()
        .map(|&m| {
            let res = match cfg.kind {
                ExperimentKind::CiTable => {
                    let truth = params.gamma[(0, 0)];
                    let interval = match m {
                        Method::La => la_interval(&path, (0, 0), cfg.alpha),
                        Method::B | Method::Iv => {
                            let method = if m == Method::B { RegionMethod::B } else { RegionMethod::Iv };
                            let spec = RegionSpec::new(method, cfg.alpha).with_quantile(qcfg.clone());
                            project_ci(&path, (0, 0), &spec, &eam)
                        }
                    };
                    interval.map(|ci| Outcome::Done {
                        hit: ci.contains(truth),
                        length: Some(ci.length()),
                        budget_exhausted: ci.flags.iter().any(|f| f == "budget_exhausted"),
                    })
                }
                _ => {
                    let method = match m {
                        Method::B => PrMethod::B,
                        Method::Iv => PrMethod::Iv,
                        Method::La => PrMethod::La,
                    };
                    let opts = PrTestOptions { eam: eam.clone(), quantile: qcfg.clone() };
                    pr_test(&path, cfg.alpha1, cfg.alpha2, method, &opts).map(|t| Outcome::Done {
                        hit: t.reject,
                        length: None,
                        budget_exhausted: t.flags.iter().any(|f| f == "budget_exhausted"),
                    })
                }
            };
            res.unwrap_or_else(|e| Outcome::Failed { error: e.to_string() })
        })
        .collect()
}

const CSV_HEADER: &str = "experiment,kind,d,n,regime,delta,method,replications,successes,failures,skipped,\
budget_exhausted,rate,median_length,valid,config_digest,master_seed";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentResult {
    /// One row per cell and method; floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.name,
                self.kind.tag(),
                c.d,
                c.n,
                c.regime.map(Regime::tag).unwrap_or(""),
                opt(c.delta),
                c.method,
                c.replications,
                c.successes,
                c.failures,
                c.skipped,
                c.budget_exhausted,
                c.rate,
                opt(c.median_length),
                c.valid,
                self.config_digest,
                self.master_seed
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Wall-clock figures, kept out of the reproducible outputs.
    pub fn timing_json(&self) -> String {
        let cells: Vec<_> = self
            .cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "d": c.d, "n": c.n, "regime": c.regime, "delta": c.delta,
                    "method": c.method, "replication_seconds": c.seconds,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "name": self.name,
            "config_digest": self.config_digest,
            "total_seconds": self.seconds,
            "cells": cells,
        }))
        .expect("timing serializes")
    }

    /// Fixed-width summary for terminals.
    pub fn table(&self) -> String {
        let metric = if self.kind == ExperimentKind::CiTable { "coverage" } else { "reject" };
        let mut s = format!(
            "{:>3} {:>5} {:>13} {:>7} {:>7} {:>9} {:>9} {:>6} {:>6}\n",
            "d", "n", "regime", "delta", "method", metric, "med_len", "fail", "budget"
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{:>3} {:>5} {:>13} {:>7} {:>7} {:>9.3} {:>9} {:>6} {:>6}{}\n",
                c.d,
                c.n,
                c.regime.map(Regime::tag).unwrap_or("-"),
                c.delta.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                c.method,
                c.rate,
                c.median_length.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                c.failures,
                c.budget_exhausted,
                if c.valid { "" } else { "  invalid" }
            ));
        }
        if self.partial {
            s.push_str("partial: interrupted before all replications ran\n");
        }
        s
    }
}
