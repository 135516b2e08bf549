//! Least squares, lag-augmented and IVX estimation with the associated t²/Wald statistics.

use nalgebra::{DMatrix, DVector};

use crate::dist::normal_quantile;
use crate::error::{CoreError, Result};
use crate::linalg::{gated_inverse, gated_spd_inverse, inv_sqrt, kron, symmetrize, unvec_col, vec_col};
use crate::model::VarPath;

/// Default IVX persistence exponent.
pub const DEFAULT_IVX_BETA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    /// `n⁻¹ Σ X_{t-1} X_{t-1}ᵀ`
    pub s_xx: DMatrix<f64>,
    /// `n⁻¹ Σ X_t X_{t-1}ᵀ`
    pub s_x1x0: DMatrix<f64>,
    pub n: usize,
    pub d: usize,
}

impl SampleMoments {
    pub fn from_path(path: &VarPath) -> Self {
        let (n, d) = (path.n(), path.d());
        let x = path.data();
        // X_0 = 0 drops out, so the lag sums run over rows X_1..X_{n-1}.
        let lagged = x.rows(0, n - 1);
        let current = x.rows(1, n - 1);
        let s_xx = symmetrize(&(lagged.transpose() * lagged)) / n as f64;
        let s_x1x0 = (current.transpose() * lagged) / n as f64;
        SampleMoments { s_xx, s_x1x0, n, d }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub gamma_hat: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Row `t-1` holds `ε̂_t`.
    pub residuals: DMatrix<f64>,
    pub moments: SampleMoments,
    s_xx_inv: DMatrix<f64>,
}

pub fn ols_estimate(path: &VarPath) -> Result<OlsFit> {
    let moments = SampleMoments::from_path(path);
    let s_xx_inv = gated_spd_inverse(&moments.s_xx, "S_XX")?;
    let gamma_hat = &moments.s_x1x0 * &s_xx_inv;
    let residuals = residuals_of(path, &gamma_hat);
    let sigma_hat = symmetrize(&(residuals.transpose() * &residuals)) / path.n() as f64;
    Ok(OlsFit { gamma_hat, sigma_hat, residuals, moments, s_xx_inv })
}

fn residuals_of(path: &VarPath, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (path.n(), path.d());
    let x = path.data();
    let mut res = x.clone();
    if n > 1 {
        let pred = x.rows(0, n - 1) * gamma.transpose();
        let mut tail = res.rows_mut(1, n - 1);
        tail -= pred;
    }
    debug_assert_eq!(res.ncols(), d);
    res
}

impl OlsFit {
    pub fn n(&self) -> usize {
        self.moments.n
    }

    pub fn d(&self) -> usize {
        self.moments.d
    }

    pub fn s_xx_inverse(&self) -> &DMatrix<f64> {
        &self.s_xx_inv
    }

    /// `tr(n Σ̂^{-1/2} (Γ̂ - Γ₀) S_XX (Γ̂ - Γ₀)ᵀ Σ̂^{-1/2})`.
    pub fn t2(&self, gamma0: &DMatrix<f64>) -> Result<f64> {
        quadratic_trace(&self.gamma_hat, gamma0, &self.moments.s_xx, &self.sigma_hat, self.n())
    }
}

fn quadratic_trace(
    center: &DMatrix<f64>,
    gamma0: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    sigma_hat: &DMatrix<f64>,
    n: usize,
) -> Result<f64> {
    if gamma0.shape() != center.shape() {
        return Err(CoreError::InvalidInput(format!("gamma0 shape {:?} vs {:?}", gamma0.shape(), center.shape())));
    }
    crate::linalg::gated_spd_inverse(sigma_hat, "Σ̂")?;
    let w = inv_sqrt(sigma_hat);
    let delta = &w * (center - gamma0);
    let value = n as f64 * (&delta * weight * delta.transpose()).trace();
    Ok(value.max(0.0))
}

pub fn t2_stat(path: &VarPath, gamma0: &DMatrix<f64>) -> Result<f64> {
    ols_estimate(path)?.t2(gamma0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagAugFit {
    /// `d × 2d` coefficients on `(X_{t-1}ᵀ, X_{t-2}ᵀ)ᵀ`.
    pub pi_hat: DMatrix<f64>,
    pub gamma_la: DMatrix<f64>,
    /// `Σ̂⁻¹ ⊗ Σ̂` with the least-squares `Σ̂`.
    pub sigma_la_cov: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub n: usize,
    pub d: usize,
}

/// Regresses `X_t` on `(X_{t-1}, X_{t-2})` over `t = 2..n`.
pub fn lag_augmented_estimate(path: &VarPath) -> Result<LagAugFit> {
    path.require_lag_augmentation_length()?;
    let (n, d) = (path.n(), path.d());
    let x = path.data();
    let m = n - 1;
    // Regressor row for t (t = 2..n) is (X_{t-1}, X_{t-2}); X_0 = 0.
    let mut reg = DMatrix::<f64>::zeros(m, 2 * d);
    for (r, t) in (2..=n).enumerate() {
        reg.view_mut((r, 0), (1, d)).copy_from(&x.row(t - 2));
        if t >= 3 {
            reg.view_mut((r, d), (1, d)).copy_from(&x.row(t - 3));
        }
    }
    let y = x.rows(1, m);
    let gram = symmetrize(&(reg.transpose() * &reg)) / m as f64;
    let gram_inv = gated_spd_inverse(&gram, "lag-augmented Gram matrix")?;
    let cross = (y.transpose() * &reg) / m as f64;
    let pi_hat = cross * gram_inv;
    let gamma_la = pi_hat.columns(0, d).into_owned();
    let ols = ols_estimate(path)?;
    let sigma_inv = gated_spd_inverse(&ols.sigma_hat, "Σ̂")?;
    let sigma_la_cov = kron(&sigma_inv, &ols.sigma_hat);
    Ok(LagAugFit { pi_hat, gamma_la, sigma_la_cov, sigma_hat: ols.sigma_hat, n, d })
}

impl LagAugFit {
    /// `n (A vec(Γ̂_LA) - b)ᵀ (A Σ̂_LA Aᵀ)⁻¹ (A vec(Γ̂_LA) - b)` with column-stacking `vec`.
    pub fn wald(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
        let dd = self.d * self.d;
        if a.ncols() != dd || a.nrows() != b.len() || a.nrows() == 0 || a.nrows() > dd {
            return Err(CoreError::InvalidInput(format!("restriction {:?} with b of length {}", a.shape(), b.len())));
        }
        let v = a * vec_col(&self.gamma_la) - b;
        let cov = symmetrize(&(a * &self.sigma_la_cov * a.transpose()));
        let inv = gated_spd_inverse(&cov, "A Σ̂_LA Aᵀ").map_err(|_| CoreError::RankDeficient)?;
        Ok((self.n as f64 * (v.transpose() * inv * &v)[(0, 0)]).max(0.0))
    }

    /// `σ̂²_{LA,ij} = (Σ̂⁻¹)_{jj} Σ̂_{ii}`.
    pub fn coordinate_variance(&self, i: usize, j: usize) -> f64 {
        let k = i + j * self.d;
        self.sigma_la_cov[(k, k)]
    }

    /// `Γ̂_{LA,ij} ± z_{1-α/2} σ̂_{LA,ij} / √n`.
    pub fn ci(&self, i: usize, j: usize, alpha: f64) -> Result<(f64, f64)> {
        if i >= self.d || j >= self.d {
            return Err(CoreError::InvalidInput(format!("coordinate ({i}, {j}) out of range for d = {}", self.d)));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CoreError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
        }
        let z = normal_quantile(1.0 - alpha / 2.0)?;
        let half = z * (self.coordinate_variance(i, j) / self.n as f64).sqrt();
        let c = self.gamma_la[(i, j)];
        Ok((c - half, c + half))
    }
}

pub fn wald_la(fit: &LagAugFit, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    fit.wald(a, b)
}

pub fn ci_la(fit: &LagAugFit, i: usize, j: usize, alpha: f64) -> Result<(f64, f64)> {
    fit.ci(i, j, alpha)
}

/// Row selector for coordinate `(i, j)` of `vec(Γ)`.
pub fn coordinate_selector(d: usize, coords: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(coords.len(), d * d);
    for (r, &(i, j)) in coords.iter().enumerate() {
        a[(r, i + j * d)] = 1.0;
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvxFit {
    pub beta: f64,
    /// Row `t-1` holds `Z_t`.
    pub z_path: DMatrix<f64>,
    pub gamma_iv: DMatrix<f64>,
    /// `n⁻¹ Σ X_{t-1} Z_{t-1}ᵀ`
    pub s_xz: DMatrix<f64>,
    /// `n⁻¹ Σ Z_{t-1} Z_{t-1}ᵀ`
    pub s_zz: DMatrix<f64>,
    pub n: usize,
}

/// `Z_t = (1 - n^{-β}) Z_{t-1} + ΔX_t`, `Z_0 = 0`.
pub fn ivx_instrument(path: &VarPath, beta: f64) -> DMatrix<f64> {
    let (n, d) = (path.n(), path.d());
    let rho = 1.0 - (n as f64).powf(-beta);
    let x = path.data();
    let mut z = DMatrix::<f64>::zeros(n, d);
    for t in 0..n {
        for k in 0..d {
            let prev_z = if t == 0 { 0.0 } else { z[(t - 1, k)] };
            let prev_x = if t == 0 { 0.0 } else { x[(t - 1, k)] };
            z[(t, k)] = rho * prev_z + (x[(t, k)] - prev_x);
        }
    }
    z
}

pub fn ivx_estimate(path: &VarPath, beta: f64) -> Result<IvxFit> {
    if !(beta > 0.5 && beta < 1.0) {
        return Err(CoreError::InvalidInput(format!("IVX beta {beta} outside (1/2, 1)")));
    }
    let (n, _) = (path.n(), path.d());
    let x = path.data();
    let z_path = ivx_instrument(path, beta);
    let lag_x = x.rows(0, n - 1);
    let lag_z = z_path.rows(0, n - 1);
    let cur_x = x.rows(1, n - 1);
    let sum_xz_lag = lag_x.transpose() * lag_z;
    let sum_x1z = cur_x.transpose() * lag_z;
    let inv = gated_inverse(&sum_xz_lag, "Σ X_{t-1} Z_{t-1}ᵀ")?;
    let gamma_iv = sum_x1z * inv;
    let s_xz = sum_xz_lag / n as f64;
    let s_zz = symmetrize(&(lag_z.transpose() * lag_z)) / n as f64;
    Ok(IvxFit { beta, z_path, gamma_iv, s_xz, s_zz, n })
}

impl IvxFit {
    /// `S_XZ S_ZZ⁻¹ S_ZX`.
    pub fn weight(&self) -> Result<DMatrix<f64>> {
        let s_zz_inv = gated_spd_inverse(&self.s_zz, "S_ZZ")?;
        Ok(symmetrize(&(&self.s_xz * s_zz_inv * self.s_xz.transpose())))
    }

    /// `tr(n Σ̂^{-1/2} (Γ̂_IV - Γ₀) S_XZ S_ZZ⁻¹ S_ZX (Γ̂_IV - Γ₀)ᵀ Σ̂^{-1/2})`.
    pub fn t2(&self, sigma_hat: &DMatrix<f64>, gamma0: &DMatrix<f64>) -> Result<f64> {
        quadratic_trace(&self.gamma_iv, gamma0, &self.weight()?, sigma_hat, self.n)
    }
}

pub fn t2_ivx(fit: &IvxFit, sigma_hat: &DMatrix<f64>, gamma0: &DMatrix<f64>) -> Result<f64> {
    fit.t2(sigma_hat, gamma0)
}

/// Unvectorizes a `d²` vector into a `d × d` matrix (column stacking).
pub fn unvec_square(v: &[f64], d: usize) -> DMatrix<f64> {
    unvec_col(v, d, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{equicorrelated_sigma, simulate_var, ErrorSpec, ModelParams};
    use nalgebra::dmatrix;

    fn path(gamma: DMatrix<f64>, n: usize, seed: u64) -> VarPath {
        let d = gamma.nrows();
        let p = ModelParams::new(gamma, equicorrelated_sigma(d)).unwrap();
        simulate_var(&p, n, &ErrorSpec::Gaussian, seed).unwrap()
    }

    #[test]
    fn two_point_scalar_ols() {
        let p = VarPath::new(dmatrix![1.5; -0.6]).unwrap();
        let fit = ols_estimate(&p).unwrap();
        assert!((fit.gamma_hat[(0, 0)] - (-0.6 / 1.5)).abs() < 1e-15);
    }

    #[test]
    fn residuals_orthogonal_to_regressors() {
        let p = path(dmatrix![0.9, 0.1, 0.0; 0.0, 0.5, 0.2; 0.1, 0.0, 0.3], 200, 3);
        let fit = ols_estimate(&p).unwrap();
        let n = p.n();
        let cross = p.data().rows(0, n - 1).transpose() * fit.residuals.rows(1, n - 1) / n as f64;
        assert!(cross.amax() < 1e-8 * fit.moments.s_xx.amax());
    }

    #[test]
    fn t2_zero_at_estimate_and_scalar_form() {
        let p = path(dmatrix![0.7], 100, 1);
        let fit = ols_estimate(&p).unwrap();
        assert!(fit.t2(&fit.gamma_hat).unwrap().abs() < 1e-20);
        let g0 = dmatrix![0.5];
        let expect = 100.0 * (fit.gamma_hat[(0, 0)] - 0.5).powi(2) * fit.moments.s_xx[(0, 0)] / fit.sigma_hat[(0, 0)];
        assert!((fit.t2(&g0).unwrap() - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn lag_augmented_pieces() {
        let p = path(DMatrix::identity(2, 2), 300, 4);
        let fit = lag_augmented_estimate(&p).unwrap();
        assert_eq!(fit.gamma_la, fit.pi_hat.columns(0, 2).into_owned());
        let a = coordinate_selector(2, &[(0, 1)]);
        let b = DVector::from_element(1, fit.gamma_la[(0, 1)]);
        assert!(fit.wald(&a, &b).unwrap() < 1e-20);
        // Scalar form n (a - b)² / σ̂².
        let b = DVector::from_element(1, 0.0);
        let expect = 300.0 * fit.gamma_la[(0, 1)].powi(2) / fit.coordinate_variance(0, 1);
        assert!((fit.wald(&a, &b).unwrap() - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn la_interval_width_with_identity_covariance() {
        let p = path(DMatrix::identity(2, 2), 100, 8);
        let mut fit = lag_augmented_estimate(&p).unwrap();
        fit.sigma_la_cov = DMatrix::identity(4, 4);
        let (lo, hi) = fit.ci(1, 0, 0.05).unwrap();
        assert!((hi - lo - 2.0 * 1.959963984540054 / 10.0).abs() < 1e-12);
        let (lo, hi) = fit.ci(1, 0, 1.0 - 1e-12).unwrap();
        assert!(hi - lo < 1e-10);
    }

    #[test]
    fn ivx_instrument_recursion() {
        let p = path(dmatrix![0.95, 0.0; 0.1, 0.8], 60, 2);
        let fit = ivx_estimate(&p, 0.9).unwrap();
        assert_eq!(fit.z_path.row(0), p.data().row(0));
        assert_eq!(ivx_instrument(&p, 0.9), fit.z_path);
        assert!(fit.t2(&DMatrix::identity(2, 2), &fit.gamma_iv).unwrap().abs() < 1e-20);
        assert!(ivx_estimate(&p, 0.5).is_err());
    }

    #[test]
    fn singular_moments_are_reported() {
        let p = VarPath::new(dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0; 4.0, 8.0]).unwrap();
        assert!(matches!(ols_estimate(&p), Err(CoreError::SingularMoments(_))));
    }
}
