//! Confidence regions for `Γ`, projected coordinate intervals and predictive-regression tests.
//!
//! Projections and the Bonferroni tests search in whitened coordinates
//! `Γ(z) = Γ̂ + L_Σ Z L_W⁻¹ / √n`, where `Σ̂ = L_Σ L_Σᵀ`, `W = L_W L_Wᵀ` is the statistic's weight
//! (`S_XX` or `S_XZ S_ZZ⁻¹ S_ZX`) and `z = vec(Z)`. In these coordinates the statistic is `‖z‖²`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uvi_eam::{
    eam_maximize, maximize_cheap_constrained, Bounds, CheapConstrainedOptions, ConstrainedObjective, EamOptions,
    Evaluation,
};

use crate::dist::chi2_quantile;
use crate::error::{CoreError, Result};
use crate::estimators::{
    coordinate_selector, ivx_estimate, lag_augmented_estimate, ols_estimate, IvxFit, OlsFit, DEFAULT_IVX_BETA,
};
use crate::linalg::{gated_spd_inverse, symmetrize};
use crate::model::VarPath;
use crate::quantiles::{simulate_ou_t2, OuConfig, QuantileSession, EAM_REPLICATIONS};

pub const DEFAULT_OU_GRID: usize = 500;
/// Half-width of the `cr_b`/`cr_a` search box in whitened units, relative to `√q(Γ̂)`.
pub const SIMULATED_BOX_FACTOR: f64 = std::f64::consts::SQRT_2;
/// Half-width of the `cr_iv` search box relative to `√q`.
pub const FIXED_BOX_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMethod {
    /// Ornstein–Uhlenbeck quantiles with `C` from the candidate's spectrum.
    A,
    /// Gaussian-counterpart quantiles.
    B,
    /// IVX statistic against a fixed χ² quantile.
    Iv,
}

impl RegionMethod {
    pub fn tag(self) -> &'static str {
        match self {
            RegionMethod::A => "cr_a",
            RegionMethod::B => "cr_b",
            RegionMethod::Iv => "cr_iv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub replications: usize,
    pub seed: u64,
    pub ivx_beta: f64,
    pub ou_grid_steps: usize,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { replications: EAM_REPLICATIONS, seed: 0, ivx_beta: DEFAULT_IVX_BETA, ou_grid_steps: DEFAULT_OU_GRID }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub method: RegionMethod,
    pub alpha: f64,
    pub quantile: QuantileConfig,
}

impl RegionSpec {
    pub fn new(method: RegionMethod, alpha: f64) -> Self {
        RegionSpec { method, alpha, quantile: QuantileConfig::default() }
    }

    pub fn with_quantile(mut self, quantile: QuantileConfig) -> Self {
        self.quantile = quantile;
        self
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CoreError::InvalidInput(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// Affine whitening map between `Γ` and `z`.
#[derive(Debug, Clone)]
pub struct Whitening {
    pub center: DMatrix<f64>,
    l_sigma: DMatrix<f64>,
    l_weight_inv: DMatrix<f64>,
    scale: f64,
}

impl Whitening {
    pub fn new(center: DMatrix<f64>, sigma: &DMatrix<f64>, weight: &DMatrix<f64>, n: usize) -> Result<Self> {
        gated_spd_inverse(sigma, "Σ̂")?;
        gated_spd_inverse(weight, "weight")?;
        let l_sigma = symmetrize(sigma).cholesky().ok_or(CoreError::SingularMoments("Σ̂".into()))?.l();
        let l_w = symmetrize(weight).cholesky().ok_or(CoreError::SingularMoments("weight".into()))?.l();
        let l_weight_inv = l_w.try_inverse().ok_or(CoreError::SingularMoments("weight".into()))?;
        Ok(Whitening { center, l_sigma, l_weight_inv, scale: 1.0 / (n as f64).sqrt() })
    }

    pub fn d(&self) -> usize {
        self.center.nrows()
    }

    pub fn gamma_at(&self, z: &[f64]) -> DMatrix<f64> {
        let d = self.d();
        let zm = DMatrix::from_column_slice(d, d, z);
        &self.center + &self.l_sigma * zm * &self.l_weight_inv * self.scale
    }

    pub fn whiten(&self, gamma: &DMatrix<f64>) -> Vec<f64> {
        let l_w = self.l_weight_inv.clone().try_inverse().expect("triangular factor is invertible");
        let l_s_inv = self.l_sigma.clone().try_inverse().expect("triangular factor is invertible");
        let z = l_s_inv * (gamma - &self.center) * l_w / self.scale;
        z.as_slice().to_vec()
    }

    /// `∂Γ_{ij}/∂z` (constant).
    pub fn coordinate_gradient(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.d();
        let mut g = vec![0.0; d * d];
        for b in 0..d {
            for a in 0..d {
                g[a + b * d] = self.l_sigma[(i, a)] * self.l_weight_inv[(b, j)] * self.scale;
            }
        }
        g
    }

    /// Pulls a gradient with respect to `Γ` back to `z`.
    pub fn pull_back(&self, grad_gamma: &DMatrix<f64>) -> Vec<f64> {
        let gz = self.l_sigma.transpose() * grad_gamma * self.l_weight_inv.transpose() * self.scale;
        gz.as_slice().to_vec()
    }
}

/// A confidence region fitted to one path.
#[derive(Debug, Clone)]
pub struct Region {
    pub spec: RegionSpec,
    pub ols: OlsFit,
    pub ivx: Option<IvxFit>,
    pub whitening: Whitening,
    session: Option<QuantileSession>,
    fixed_critical: Option<f64>,
}

impl Region {
    pub fn new(path: &VarPath, spec: &RegionSpec) -> Result<Self> {
        check_level(spec.alpha)?;
        let (n, d) = (path.n(), path.d());
        let ols = ols_estimate(path)?;
        let (ivx, whitening, session, fixed_critical) = match spec.method {
            RegionMethod::Iv => {
                let fit = ivx_estimate(path, spec.quantile.ivx_beta)?;
                let w = Whitening::new(fit.gamma_iv.clone(), &ols.sigma_hat, &fit.weight()?, n)?;
                let q = chi2_quantile(d * d, 1.0 - spec.alpha)?;
                (Some(fit), w, None, Some(q))
            }
            RegionMethod::B => {
                let w = Whitening::new(ols.gamma_hat.clone(), &ols.sigma_hat, &ols.moments.s_xx, n)?;
                let s = QuantileSession::new(spec.quantile.seed, spec.quantile.replications, n, d)?;
                (None, w, Some(s), None)
            }
            RegionMethod::A => {
                if spec.quantile.replications < crate::quantiles::MIN_REPLICATIONS {
                    return Err(CoreError::InvalidInput("too few replications".into()));
                }
                let w = Whitening::new(ols.gamma_hat.clone(), &ols.sigma_hat, &ols.moments.s_xx, n)?;
                (None, w, None, None)
            }
        };
        Ok(Region { spec: spec.clone(), ols, ivx, whitening, session, fixed_critical })
    }

    pub fn n(&self) -> usize {
        self.ols.n()
    }

    pub fn d(&self) -> usize {
        self.ols.d()
    }

    pub fn statistic(&self, gamma0: &DMatrix<f64>) -> Result<f64> {
        match &self.ivx {
            Some(fit) => fit.t2(&self.ols.sigma_hat, gamma0),
            None => self.ols.t2(gamma0),
        }
    }

    pub fn critical_value(&self, gamma0: &DMatrix<f64>) -> Result<f64> {
        if let Some(q) = self.fixed_critical {
            return Ok(q);
        }
        let level = 1.0 - self.spec.alpha;
        match &self.session {
            Some(s) => s.quantile(gamma0, &self.ols.sigma_hat, level),
            None => {
                let cfg = OuConfig::from_gamma(gamma0, &self.ols.sigma_hat, self.n(), self.spec.quantile.ou_grid_steps)?;
                simulate_ou_t2(&cfg, level, self.spec.quantile.replications, self.spec.quantile.seed)
            }
        }
    }

    pub fn contains(&self, gamma0: &DMatrix<f64>) -> Result<bool> {
        if gamma0.shape() != (self.d(), self.d()) {
            return Err(CoreError::InvalidInput(format!("gamma0 must be {0}×{0}", self.d())));
        }
        let stat = self.statistic(gamma0)?;
        Ok(stat <= self.critical_value(gamma0)?)
    }

    /// Critical value at a whitened point; `NaN` (infeasible, kept out of the surrogate) on failure.
    pub fn critical_at(&self, z: &[f64]) -> f64 {
        self.critical_value(&self.whitening.gamma_at(z)).unwrap_or(f64::NAN)
    }

    fn box_radius(&self) -> Result<f64> {
        match self.fixed_critical {
            Some(q) => Ok(FIXED_BOX_FACTOR * q.sqrt()),
            None => Ok(SIMULATED_BOX_FACTOR * self.critical_value(&self.whitening.center)?.sqrt()),
        }
    }
}

pub fn region_contains(path: &VarPath, gamma0: &DMatrix<f64>, spec: &RegionSpec) -> Result<bool> {
    Region::new(path, spec)?.contains(gamma0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalResult {
    pub lower: f64,
    pub upper: f64,
    pub method: String,
    pub alpha: f64,
    pub coord: (usize, usize),
    /// Evaluations of the expensive critical value (0 for closed forms and fixed quantiles).
    pub evaluations: usize,
    pub iterations: usize,
    pub flags: Vec<String>,
}

impl IntervalResult {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "method": self.method,
            "alpha": self.alpha,
            "coord": [self.coord.0 + 1, self.coord.1 + 1],
            "interval": [self.lower, self.upper],
            "evaluations": self.evaluations,
            "iterations": self.iterations,
            "flags": self.flags,
        })
    }
}

/// Closed-form lag-augmented interval for `Γ_{ij}`.
pub fn la_interval(path: &VarPath, coord: (usize, usize), alpha: f64) -> Result<IntervalResult> {
    let fit = lag_augmented_estimate(path)?;
    let (lower, upper) = fit.ci(coord.0, coord.1, alpha)?;
    Ok(IntervalResult {
        lower,
        upper,
        method: "la".into(),
        alpha,
        coord,
        evaluations: 0,
        iterations: 0,
        flags: Vec::new(),
    })
}

struct CoordinateProblem {
    gradient: Vec<f64>,
    offset: f64,
    sign: f64,
}

impl ConstrainedObjective for CoordinateProblem {
    fn dim(&self) -> usize {
        self.gradient.len()
    }

    fn f(&self, x: &[f64]) -> f64 {
        self.sign * (self.offset + x.iter().zip(&self.gradient).map(|(a, b)| a * b).sum::<f64>())
    }

    fn grad_f(&self, _: &[f64]) -> Vec<f64> {
        self.gradient.iter().map(|g| self.sign * g).collect()
    }

    fn g(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn grad_g(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * v).collect()
    }
}

/// Projection of the region onto `Γ_{ij}`: `sup` and `inf` of the coordinate over the region.
pub fn project_ci(path: &VarPath, coord: (usize, usize), spec: &RegionSpec, optimizer: &EamOptions) -> Result<IntervalResult> {
    let region = Region::new(path, spec)?;
    project_region(&region, coord, optimizer)
}

pub fn project_region(region: &Region, coord: (usize, usize), optimizer: &EamOptions) -> Result<IntervalResult> {
    let d = region.d();
    let (i, j) = coord;
    if i >= d || j >= d {
        return Err(CoreError::InvalidInput(format!("coordinate ({}, {}) out of range for d = {d}", i + 1, j + 1)));
    }
    let w = &region.whitening;
    let p = d * d;
    let gradient = w.coordinate_gradient(i, j);
    let offset = w.center[(i, j)];
    let bounds = Bounds::symmetric(p, region.box_radius()?)?;
    let mut flags = Vec::new();

    if let Some(q) = region.fixed_critical {
        let mut rng = ChaCha8Rng::seed_from_u64(optimizer.seed);
        let h = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() - q, x.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        let origin = vec![0.0; p];
        let mut ends = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let prob = CoordinateProblem { gradient: gradient.clone(), offset, sign };
            let f = |x: &[f64]| (prob.f(x), prob.grad_f(x));
            let res = maximize_cheap_constrained(f, h, &bounds, Some(&origin), &CheapConstrainedOptions::default(), &mut rng)
                .ok_or(CoreError::EmptyRegion)?;
            if bounds.touches_face(&res.x, 1e-6) {
                flags.push("box_hit".to_string());
            }
            ends[k] = sign * res.value;
        }
        return Ok(IntervalResult {
            lower: ends[1].min(offset),
            upper: ends[0].max(offset),
            method: region.spec.method.tag().into(),
            alpha: region.spec.alpha,
            coord,
            evaluations: 0,
            iterations: 0,
            flags,
        });
    }

    let origin = vec![0.0; p];
    let prior = vec![Evaluation { x: origin.clone(), c: region.critical_at(&origin) }];
    let upper_problem = CoordinateProblem { gradient: gradient.clone(), offset, sign: 1.0 };
    let up = eam_maximize(&upper_problem, |x| region.critical_at(x), &bounds, optimizer, &prior)?;
    let lower_problem = CoordinateProblem { gradient, offset, sign: -1.0 };
    let mut lower_opts = optimizer.clone();
    lower_opts.seed = optimizer.seed.wrapping_add(1);
    let lo = eam_maximize(&lower_problem, |x| region.critical_at(x), &bounds, &lower_opts, &up.evaluations)?;
    for out in [&up, &lo] {
        if out.box_hit {
            flags.push("box_hit".to_string());
        }
        if !out.converged {
            flags.push("budget_exhausted".to_string());
        }
        if !out.feasible {
            flags.push("infeasible".to_string());
        }
    }
    flags.dedup();
    let upper = if up.feasible { up.y_best.max(offset) } else { offset };
    let lower = if lo.feasible { (-lo.y_best).min(offset) } else { offset };
    Ok(IntervalResult {
        lower,
        upper,
        method: region.spec.method.tag().into(),
        alpha: region.spec.alpha,
        coord,
        evaluations: 1 + up.new_evaluations + lo.new_evaluations,
        iterations: up.iterations + lo.iterations,
        flags,
    })
}

/// Conditional regression of `Y_t` (first coordinate) on `X̃_{t-1}` given `Γ̃`.
///
/// `γ̂_Γ̃ = a + (Γ̃ - Γ̂_X̃)ᵀ δ̂`, where `a` is the least-squares coefficient of `Y_t` on `X̃_{t-1}`,
/// `Γ̂_X̃` the least-squares autoregression of `X̃` and `δ̂ = Σ̂_X⁻¹ Σ̂_XY`. `Σ̂` is the residual
/// covariance of the regression of every coordinate on `X̃_{t-1}`.
#[derive(Debug, Clone)]
pub struct ConditionalRegression {
    pub a: DVector<f64>,
    pub gamma_x_hat: DMatrix<f64>,
    pub delta: DVector<f64>,
    /// `n⁻¹ Σ X̃_{t-1} X̃_{t-1}ᵀ`
    pub s: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub sigma2_y: f64,
    pub n: usize,
}

impl ConditionalRegression {
    pub fn new(path: &VarPath) -> Result<Self> {
        let (n, d) = (path.n(), path.d());
        if d < 2 {
            return Err(CoreError::InvalidInput("predictive regression needs d >= 2".into()));
        }
        let x = path.data();
        let lagged = x.view((0, 1), (n - 1, d - 1));
        let current = x.rows(1, n - 1);
        let s = symmetrize(&(lagged.transpose() * lagged)) / n as f64;
        let s_inv = gated_spd_inverse(&s, "S_X̃X̃")?;
        // Row k of `coef` regresses coordinate k on X̃_{t-1}.
        let coef = (current.transpose() * lagged) / n as f64 * &s_inv;
        let resid = current - lagged * coef.transpose();
        let mut sigma_hat = symmetrize(&(resid.transpose() * &resid));
        // t = 1 contributes ε̂_1 = X_1.
        let first = x.row(0).transpose();
        sigma_hat += &first * first.transpose();
        let sigma_hat = sigma_hat / n as f64;
        let sigma_x = sigma_hat.view((1, 1), (d - 1, d - 1)).into_owned();
        let sigma_xy = sigma_hat.view((1, 0), (d - 1, 1)).column(0).into_owned();
        let sigma_x_inv = gated_spd_inverse(&sigma_x, "Σ̂_X")?;
        let delta = &sigma_x_inv * &sigma_xy;
        let sigma2_y = sigma_hat[(0, 0)] - sigma_xy.dot(&delta);
        if !(sigma2_y > 0.0) {
            return Err(CoreError::SingularMoments("σ̂²_Y".into()));
        }
        Ok(ConditionalRegression {
            a: coef.row(0).transpose(),
            gamma_x_hat: coef.view((1, 0), (d - 1, d - 1)).into_owned(),
            delta,
            s,
            sigma_hat,
            sigma2_y,
            n,
        })
    }

    pub fn gamma_hat(&self, gamma_tilde: &DMatrix<f64>) -> DVector<f64> {
        &self.a + (gamma_tilde - &self.gamma_x_hat).transpose() * &self.delta
    }

    /// `n (γ̂_Γ̃ - γ₀)ᵀ S (γ̂_Γ̃ - γ₀)`.
    pub fn t2(&self, gamma_tilde: &DMatrix<f64>, gamma0: &DVector<f64>) -> f64 {
        let v = self.gamma_hat(gamma_tilde) - gamma0;
        self.n as f64 * (v.transpose() * &self.s * &v)[(0, 0)]
    }

    /// `σ̂_Y⁻² t̂²_{0|Γ̃}`.
    pub fn null_statistic(&self, gamma_tilde: &DMatrix<f64>) -> f64 {
        self.t2(gamma_tilde, &DVector::zeros(self.a.len())) / self.sigma2_y
    }

    /// Gradient of [`Self::null_statistic`] with respect to `Γ̃`.
    pub fn null_statistic_gradient(&self, gamma_tilde: &DMatrix<f64>) -> DMatrix<f64> {
        let g = self.gamma_hat(gamma_tilde);
        &self.delta * (&self.s * g).transpose() * (2.0 * self.n as f64 / self.sigma2_y)
    }
}

/// Returns `(γ̂_Γ̃, t̂²_{0|Γ̃}, σ̂²_Y)`.
pub fn conditional_gamma_stat(path: &VarPath, gamma_tilde: &DMatrix<f64>) -> Result<(DVector<f64>, f64, f64)> {
    let reg = ConditionalRegression::new(path)?;
    let k = path.d() - 1;
    if gamma_tilde.shape() != (k, k) {
        return Err(CoreError::InvalidInput(format!("gamma_tilde must be {k}×{k}")));
    }
    Ok((reg.gamma_hat(gamma_tilde), reg.t2(gamma_tilde, &DVector::zeros(k)), reg.sigma2_y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrMethod {
    B,
    Iv,
    La,
}

impl PrMethod {
    pub fn tag(self) -> &'static str {
        match self {
            PrMethod::B => "phi_b",
            PrMethod::Iv => "phi_iv",
            PrMethod::La => "phi_la",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrTestResult {
    pub reject: bool,
    /// Infimum of the normalized conditional statistic, or the Wald statistic for `phi_la`.
    pub inf_statistic: f64,
    pub critical_value: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub method: String,
    pub evaluations: usize,
    pub flags: Vec<String>,
}

impl PrTestResult {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "method": self.method,
            "alpha": [self.alpha1, self.alpha2],
            "reject": self.reject,
            "statistic": self.inf_statistic,
            "critical_value": self.critical_value,
            "evaluations": self.evaluations,
            "flags": self.flags,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PrTestOptions {
    pub eam: EamOptions,
    pub quantile: QuantileConfig,
}

struct ConditionalProblem<'a> {
    reg: &'a ConditionalRegression,
    whitening: &'a Whitening,
}

impl ConstrainedObjective for ConditionalProblem<'_> {
    fn dim(&self) -> usize {
        self.whitening.d().pow(2)
    }

    fn f(&self, x: &[f64]) -> f64 {
        -self.reg.null_statistic(&self.whitening.gamma_at(x))
    }

    fn grad_f(&self, x: &[f64]) -> Vec<f64> {
        let g = self.reg.null_statistic_gradient(&self.whitening.gamma_at(x));
        self.whitening.pull_back(&g).into_iter().map(|v| -v).collect()
    }

    fn g(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn grad_g(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * v).collect()
    }
}

/// Bonferroni test of `γ = 0`; rejects iff the infimum over `CR(α₁)` for `Γ̃` of
/// `σ̂_Y⁻² t̂²_{0|Γ̃}` exceeds `q_{d-1, 1-α₂}`. `phi_la` is the lag-augmented Wald test at `α₁ + α₂`.
pub fn pr_test(path: &VarPath, alpha1: f64, alpha2: f64, method: PrMethod, opts: &PrTestOptions) -> Result<PrTestResult> {
    check_level(alpha1)?;
    check_level(alpha2)?;
    check_level(alpha1 + alpha2)?;
    let d = path.d();
    if d < 2 {
        return Err(CoreError::InvalidInput("predictive regression needs d >= 2".into()));
    }
    let k = d - 1;
    let mut result = PrTestResult {
        reject: false,
        inf_statistic: f64::NAN,
        critical_value: f64::NAN,
        alpha1,
        alpha2,
        method: method.tag().into(),
        evaluations: 0,
        flags: Vec::new(),
    };

    if method == PrMethod::La {
        let fit = lag_augmented_estimate(path)?;
        let coords: Vec<(usize, usize)> = (1..d).map(|j| (0, j)).collect();
        let a = coordinate_selector(d, &coords);
        let stat = fit.wald(&a, &DVector::zeros(k))?;
        result.critical_value = chi2_quantile(k, 1.0 - alpha1 - alpha2)?;
        result.inf_statistic = stat;
        result.reject = stat > result.critical_value;
        return Ok(result);
    }

    let crit = chi2_quantile(k, 1.0 - alpha2)?;
    result.critical_value = crit;
    let reg = ConditionalRegression::new(path)?;
    let sub = path.columns(&(1..d).collect::<Vec<_>>())?;
    let region_method = if method == PrMethod::B { RegionMethod::B } else { RegionMethod::Iv };
    let spec = RegionSpec { method: region_method, alpha: alpha1, quantile: opts.quantile.clone() };
    let region = Region::new(&sub, &spec)?;
    let w = &region.whitening;
    let at_center = reg.null_statistic(&w.center);
    if at_center <= crit {
        result.inf_statistic = at_center;
        result.flags.push("short_circuit".into());
        return Ok(result);
    }

    let p = k * k;
    let bounds = Bounds::symmetric(p, region.box_radius()?)?;
    let problem = ConditionalProblem { reg: &reg, whitening: w };
    if let Some(q) = region.fixed_critical {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.eam.seed);
        let f = |x: &[f64]| (problem.f(x), problem.grad_f(x));
        let h = |x: &[f64]| (problem.g(x) - q, problem.grad_g(x));
        let origin = vec![0.0; p];
        let res = maximize_cheap_constrained(f, h, &bounds, Some(&origin), &CheapConstrainedOptions::default(), &mut rng)
            .ok_or(CoreError::EmptyRegion)?;
        if bounds.touches_face(&res.x, 1e-6) {
            result.flags.push("box_hit".into());
        }
        result.inf_statistic = -res.value;
        result.reject = result.inf_statistic > crit;
        return Ok(result);
    }

    let origin = vec![0.0; p];
    let prior = vec![Evaluation { x: origin.clone(), c: region.critical_at(&origin) }];
    let mut eam_opts = opts.eam.clone();
    eam_opts.target = Some(-crit);
    let out = eam_maximize(&problem, |x| region.critical_at(x), &bounds, &eam_opts, &prior)?;
    result.evaluations = 1 + out.new_evaluations;
    result.inf_statistic = if out.feasible { -out.y_best } else { at_center };
    if out.box_hit {
        result.flags.push("box_hit".into());
    }
    if result.inf_statistic <= crit {
        return Ok(result);
    }
    if !out.converged {
        // The infimum may lie below the best value found: do not reject.
        result.flags.push("budget_exhausted".into());
        return Ok(result);
    }
    result.reject = true;
    Ok(result)
}
