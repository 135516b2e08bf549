//! Parameters, assumption checks, data-generating processes and path simulation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{eigen_basis, relative_char_poly, svd_condition, sym_eigenvalues};
use crate::rng;

/// Default `α` for the eigenvalue region.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Tolerance for treating a unit-modulus eigenvalue as exactly 1.
pub const UNIT_ROOT_TOL: f64 = 1e-12;
/// Largest basis condition number accepted by [`construct_gamma_from_spectrum`].
pub const BASIS_CONDITION_GATE: f64 = 1e6;
pub const BASIS_MAX_DRAWS: usize = 50;
/// Default eigenvector condition threshold in [`check_assumptions`].
pub const EIGVEC_CONDITION_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
    #[serde(default = "one")]
    pub multiplicity: usize,
}

fn one() -> usize {
    1
}

impl SpectrumEntry {
    pub fn real(re: f64) -> Self {
        SpectrumEntry { re, im: 0.0, multiplicity: 1 }
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// `θ = (Γ, Σ, c_θ)` with an optional declared spectrum for Γ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gamma: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub moment_bound: f64,
    pub spectrum: Option<Vec<SpectrumEntry>>,
}

impl ModelParams {
    pub fn new(gamma: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let p = ModelParams { gamma, sigma, moment_bound: 1.0, spectrum: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_spectrum(mut self, spectrum: Vec<SpectrumEntry>) -> Result<Self> {
        self.spectrum = Some(spectrum);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.gamma.nrows();
        if d == 0 || !self.gamma.is_square() || self.sigma.shape() != (d, d) {
            return Err(CoreError::InvalidInput(format!(
                "gamma {:?} and sigma {:?} must be matching square matrices",
                self.gamma.shape(),
                self.sigma.shape()
            )));
        }
        if self.gamma.iter().chain(self.sigma.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput("non-finite parameter entry".into()));
        }
        if (&self.sigma - self.sigma.transpose()).amax() > 1e-10 {
            return Err(CoreError::InvalidInput("sigma is not symmetric".into()));
        }
        if sym_eigenvalues(&self.sigma).min() <= 0.0 {
            return Err(CoreError::InvalidInput("sigma is not positive definite".into()));
        }
        if !(self.moment_bound > 0.0) {
            return Err(CoreError::InvalidInput("moment bound must be positive".into()));
        }
        if let Some(spec) = &self.spectrum {
            let total: usize = spec.iter().map(|e| e.multiplicity).sum();
            if total != d {
                return Err(CoreError::InvalidInput(format!("spectrum lists {total} eigenvalues for d = {d}")));
            }
            for e in spec {
                let r = relative_char_poly(&self.gamma, e.value());
                if r > 1e-8 {
                    return Err(CoreError::InvalidInput(format!(
                        "declared eigenvalue {}+{}i does not match gamma (|det| = {r:.2e})",
                        e.re, e.im
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `Σ = ½(I + 𝟙𝟙ᵀ)`.
pub fn equicorrelated_sigma(d: usize) -> DMatrix<f64> {
    (DMatrix::identity(d, d) + DMatrix::from_element(d, d, 1.0)) * 0.5
}

/// `λ₁ = 1`, `λ_i = 1 - (1/n)^{1/(i-1)}` for `i = 2..d`.
pub fn staggered_spectrum(d: usize, n: usize) -> Vec<f64> {
    (1..=d)
        .map(|i| if i == 1 { 1.0 } else { 1.0 - (1.0 / n as f64).powf(1.0 / (i as f64 - 1.0)) })
        .collect()
}

pub fn region_radius(alpha: f64) -> f64 {
    (1.0 - alpha) * (2.0 - alpha) / alpha
}

/// Membership of `λ` in the admissible eigenvalue region for a given `α ∈ (0, 1)`.
pub fn check_eigenvalue_region(lambda: Complex64, alpha: f64) -> bool {
    let modulus = lambda.norm();
    if modulus > 1.0 + UNIT_ROOT_TOL {
        return false;
    }
    if modulus >= 1.0 - UNIT_ROOT_TOL {
        return (lambda - Complex64::new(1.0, 0.0)).norm() <= UNIT_ROOT_TOL;
    }
    let lhs = (lambda * (Complex64::new(1.0, 0.0) - lambda)).norm();
    let rhs = region_radius(alpha) * (1.0 - modulus);
    lhs <= rhs * (1.0 + 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenVerdict {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    pub in_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub alpha: f64,
    pub eigenvalues: Vec<EigenVerdict>,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub eigvec_condition: f64,
    pub condition_threshold: f64,
    pub eigen_residual: f64,
    pub pass: bool,
}

impl AssumptionReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .eigenvalues
            .iter()
            .filter(|e| !e.in_region)
            .map(|e| format!("eigenvalue {:.6}{:+.6}i outside the admissible region", e.re, e.im))
            .collect();
        if self.eigvec_condition >= self.condition_threshold {
            out.push(format!("eigenvector condition {:.3e} exceeds {:.3e}", self.eigvec_condition, self.condition_threshold));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max.is_finite()) {
            out.push("error covariance is not uniformly positive definite".into());
        }
        out
    }
}

pub fn check_assumptions(params: &ModelParams, alpha: f64) -> Result<AssumptionReport> {
    check_assumptions_with(params, alpha, EIGVEC_CONDITION_THRESHOLD)
}

pub fn check_assumptions_with(params: &ModelParams, alpha: f64, condition_threshold: f64) -> Result<AssumptionReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    params.validate()?;
    let basis = eigen_basis(&params.gamma)?;
    let eigenvalues: Vec<EigenVerdict> = basis
        .eigenvalues
        .iter()
        .map(|&l| EigenVerdict { re: l.re, im: l.im, modulus: l.norm(), in_region: check_eigenvalue_region(l, alpha) })
        .collect();
    let ev = sym_eigenvalues(&params.sigma);
    let (sigma_min, sigma_max) = (ev.min(), ev.max());
    let pass = eigenvalues.iter().all(|e| e.in_region)
        && basis.condition < condition_threshold
        && sigma_min > 0.0
        && sigma_max.is_finite();
    Ok(AssumptionReport {
        alpha,
        eigenvalues,
        sigma_max,
        sigma_min,
        eigvec_condition: basis.condition,
        condition_threshold,
        eigen_residual: basis.residual,
        pass,
    })
}

/// `Γ = U⁻¹ Λ U` with `U` uniform on `[0, 1]^{d×d}`, redrawn until `cond(U) < 10⁶`.
pub fn construct_gamma_from_spectrum(eigenvalues: &[f64], seed: u64) -> Result<(DMatrix<f64>, Vec<SpectrumEntry>)> {
    let d = eigenvalues.len();
    if d == 0 {
        return Err(CoreError::InvalidInput("empty spectrum".into()));
    }
    if eigenvalues.iter().any(|l| !(l.abs() <= 1.0)) {
        return Err(CoreError::InvalidInput("eigenvalues must satisfy |λ| <= 1".into()));
    }
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
    for attempt in 0..BASIS_MAX_DRAWS {
        let mut r = rng::stream(seed, rng::DGP, &[attempt as u64]);
        let u = DMatrix::from_fn(d, d, |_, _| r.random::<f64>());
        if !(svd_condition(&u) < BASIS_CONDITION_GATE) {
            continue;
        }
        let Some(u_inv) = u.clone().try_inverse() else { continue };
        let gamma = u_inv * &lambda * u;
        return Ok((gamma, eigenvalues.iter().map(|&l| SpectrumEntry::real(l)).collect()));
    }
    Err(CoreError::SingularBasis(BASIS_MAX_DRAWS))
}

/// Error law of the innovations; every kind has conditional covariance `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorSpec {
    Gaussian,
    /// Student-t with `df > 2`, rescaled to unit variance before applying `Σ^{1/2}`.
    ScaledStudentT { df: f64 },
    /// `"ones"`: every coordinate equals 1 (degenerate, for testing).
    /// `"rademacher"`: `Σ^{1/2}` times i.i.d. ±1 signs.
    Custom { id: String },
}

impl ErrorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ErrorSpec::Gaussian => Ok(()),
            ErrorSpec::ScaledStudentT { df } if *df > 2.0 => Ok(()),
            ErrorSpec::ScaledStudentT { df } => Err(CoreError::InvalidInput(format!("Student-t needs df > 2, got {df}"))),
            ErrorSpec::Custom { id } if id == "ones" || id == "rademacher" => Ok(()),
            ErrorSpec::Custom { id } => Err(CoreError::InvalidInput(format!("unknown error generator '{id}'"))),
        }
    }

    /// Draws `n` innovations as the rows of an `n × d` matrix.
    pub fn draw<R: Rng + ?Sized>(&self, sigma: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        self.validate()?;
        let d = sigma.nrows();
        let chol = nalgebra::Cholesky::new(sigma.clone())
            .ok_or_else(|| CoreError::InvalidInput("sigma is not positive definite".into()))?;
        let l = chol.l();
        let mut out = DMatrix::<f64>::zeros(n, d);
        let mut xi = DVector::<f64>::zeros(d);
        for t in 0..n {
            match self {
                ErrorSpec::Gaussian => xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
                ErrorSpec::ScaledStudentT { df } => {
                    let chi = ChiSquared::new(*df).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
                    let w = (chi.sample(rng) / df).sqrt();
                    let scale = ((df - 2.0) / df).sqrt();
                    xi.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal) / w * scale);
                }
                ErrorSpec::Custom { id } if id == "ones" => {
                    out.row_mut(t).fill(1.0);
                    continue;
                }
                ErrorSpec::Custom { .. } => {
                    xi.iter_mut().for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 })
                }
            }
            let e = &l * &xi;
            out.row_mut(t).copy_from(&e.transpose());
        }
        Ok(out)
    }
}

/// Observed trajectory `X_1..X_n` (rows) with the implicit start `X_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarPath {
    data: DMatrix<f64>,
}

impl VarPath {
    /// Wraps an `n × d` matrix. Estimators enforce their own sample-size requirements.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() < 2 {
            return Err(CoreError::InvalidInput(format!("path needs d >= 1 and n >= 2, got {:?}", data.shape())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput("path contains non-finite values".into()));
        }
        Ok(VarPath { data })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// `X_t` for `t = 0..=n`, with `X_0 = 0`.
    pub fn x(&self, t: usize) -> DVector<f64> {
        if t == 0 {
            DVector::zeros(self.d())
        } else {
            self.data.row(t - 1).transpose()
        }
    }

    /// Path restricted to the given columns.
    pub fn columns(&self, cols: &[usize]) -> Result<VarPath> {
        if cols.iter().any(|&c| c >= self.d()) {
            return Err(CoreError::InvalidInput("column index out of range".into()));
        }
        VarPath::new(self.data.select_columns(cols))
    }

    pub fn require_lag_augmentation_length(&self) -> Result<()> {
        let need = 2 * self.d() + 2;
        if self.n() < need {
            return Err(CoreError::InvalidInput(format!("n = {} below 2d + 2 = {need}", self.n())));
        }
        Ok(())
    }
}

/// `X_t = Γ X_{t-1} + ε_t`, `X_0 = 0`, innovations from the `errors` stream of `seed`.
pub fn simulate_var(params: &ModelParams, n: usize, errors: &ErrorSpec, seed: u64) -> Result<VarPath> {
    params.validate()?;
    let d = params.dim();
    if n < 2 * d + 2 {
        return Err(CoreError::InvalidInput(format!("n = {n} below 2d + 2 = {}", 2 * d + 2)));
    }
    let mut r = rng::stream(seed, rng::ERRORS, &[]);
    let eps = errors.draw(&params.sigma, n, &mut r)?;
    Ok(VarPath { data: propagate(&params.gamma, &eps) })
}

/// Runs the recursion for given innovations (rows of `eps`).
pub fn propagate(gamma: &DMatrix<f64>, eps: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = eps.shape();
    let mut out = DMatrix::<f64>::zeros(n, d);
    let mut prev = DVector::<f64>::zeros(d);
    for t in 0..n {
        let next = gamma * &prev + eps.row(t).transpose();
        out.row_mut(t).copy_from(&next.transpose());
        prev = next;
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    gamma: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    #[serde(default = "unit")]
    moment_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spectrum: Option<Vec<SpectrumEntry>>,
}

fn unit() -> f64 {
    1.0
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(CoreError::Parse("matrix rows are empty or ragged".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let doc = ParamsDoc {
            gamma: matrix_to_rows(&self.gamma),
            sigma: matrix_to_rows(&self.sigma),
            moment_bound: self.moment_bound,
            spectrum: self.spectrum.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        let p = ModelParams {
            gamma: rows_to_matrix(&doc.gamma)?,
            sigma: rows_to_matrix(&doc.sigma)?,
            moment_bound: doc.moment_bound,
            spectrum: doc.spectrum,
        };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn region_examples() {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        assert!(check_eigenvalue_region(c(1.0, 0.0), 0.1));
        assert!(!check_eigenvalue_region(c(-1.0, 0.0), 0.1));
        assert!(check_eigenvalue_region(c(0.1 - 1.0, 0.0), 0.1));
        assert!(!check_eigenvalue_region(c(0.1 - 1.0 - 1e-6, 0.0), 0.1));
        assert!(!check_eigenvalue_region(c(0.0, 1.0), 0.1));
        assert!(check_eigenvalue_region(c(0.0, 0.0), 0.1));
    }

    #[test]
    fn identity_passes_and_negative_unit_fails() {
        let p = ModelParams::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
        assert!(check_assumptions(&p, 0.01).unwrap().pass);
        let p = ModelParams::new(dmatrix![-1.0], dmatrix![1.0]).unwrap();
        let r = check_assumptions(&p, 0.01).unwrap();
        assert!(!r.pass);
        assert!(!r.eigenvalues[0].in_region);
    }

    #[test]
    fn jordan_block_is_rejected() {
        let p = ModelParams::new(dmatrix![1.0, 1.0; 0.0, 1.0], DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(check_assumptions(&p, 0.01), Err(CoreError::NonDiagonalizable { .. })));
    }

    #[test]
    fn staggered_spectrum_values() {
        let s = staggered_spectrum(3, 50);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.98).abs() < 1e-15);
        assert!((s[2] - (1.0 - (1.0f64 / 50.0).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn spectrum_construction_is_deterministic_and_exact() {
        let (g1, _) = construct_gamma_from_spectrum(&[1.0, 0.5], 42).unwrap();
        let (g2, _) = construct_gamma_from_spectrum(&[1.0, 0.5], 42).unwrap();
        assert_eq!(g1.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (id, _) = construct_gamma_from_spectrum(&[1.0, 1.0, 1.0], 3).unwrap();
        assert!((id - DMatrix::<f64>::identity(3, 3)).amax() < 1e-9);
        let lam = staggered_spectrum(4, 100);
        let (g, spec) = construct_gamma_from_spectrum(&lam, 9).unwrap();
        let p = ModelParams::new(g, equicorrelated_sigma(4)).unwrap().with_spectrum(spec).unwrap();
        assert!(check_assumptions(&p, DEFAULT_ALPHA).unwrap().pass);
    }

    #[test]
    fn declared_spectrum_mismatch_is_rejected() {
        let p = ModelParams::new(dmatrix![0.5], dmatrix![1.0]).unwrap();
        assert!(p.with_spectrum(vec![SpectrumEntry::real(0.4)]).is_err());
    }

    #[test]
    fn zero_gamma_path_is_error_draw() {
        let p = ModelParams::new(DMatrix::zeros(2, 2), equicorrelated_sigma(2)).unwrap();
        let path = simulate_var(&p, 20, &ErrorSpec::Gaussian, 5).unwrap();
        let eps = ErrorSpec::Gaussian.draw(&p.sigma, 20, &mut rng::stream(5, rng::ERRORS, &[])).unwrap();
        assert_eq!(path.data(), &eps);
    }

    #[test]
    fn random_walk_of_ones_is_linear() {
        let p = ModelParams::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let path = simulate_var(&p, 10, &ErrorSpec::Custom { id: "ones".into() }, 1).unwrap();
        for t in 1..=10 {
            assert_eq!(path.x(t)[0], t as f64);
        }
    }

    #[test]
    fn short_paths_are_refused() {
        let p = ModelParams::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
        assert!(simulate_var(&p, 7, &ErrorSpec::Gaussian, 1).is_err());
        assert!(simulate_var(&p, 8, &ErrorSpec::Gaussian, 1).is_ok());
    }

    #[test]
    fn params_json_round_trip() {
        let (g, spec) = construct_gamma_from_spectrum(&[1.0, 0.7], 11).unwrap();
        let p = ModelParams::new(g, equicorrelated_sigma(2)).unwrap().with_spectrum(spec).unwrap();
        let back = ModelParams::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }
}
