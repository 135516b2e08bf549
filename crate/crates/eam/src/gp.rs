//! Gaussian-process regression with a constant mean and anisotropic squared-exponential kernel
//! `exp(-Σ_k (x_k - x'_k)^2 / β_k)`. Inputs are rescaled to the unit box before fitting; the mean
//! and process variance are profiled out of the likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::local::nelder_mead;
use crate::{Bounds, EamError};

const LN_BETA_MIN: f64 = -8.0;
const LN_BETA_MAX: f64 = 7.0;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;
/// Interpolation gate at training sites: relative mean error and sd in units of `σ̂`.
pub const INTERPOLATION_MEAN_TOL: f64 = 1e-6;
pub const INTERPOLATION_SD_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GpFitOptions {
    /// Box used to rescale inputs; defaults to the data range.
    pub scale_box: Option<Bounds>,
    /// Starting values for `ln β` (unit-box coordinates). `None` uses five isotropic guesses.
    pub warm_start: Option<Vec<f64>>,
    pub max_evals_per_start: usize,
    /// When false the starting `ln β` is used as is.
    pub optimize: bool,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions { scale_box: None, warm_start: None, max_evals_per_start: 250, optimize: true }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    offset: Vec<f64>,
    scale: Vec<f64>,
    scaled: Vec<Vec<f64>>,
    ln_beta: Vec<f64>,
    mu: f64,
    sigma2: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Posterior summary at one site with gradients in the original coordinates.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: f64,
    /// Posterior sd divided by the process sd, in `[0, 1]`.
    pub unit_sd: f64,
    pub grad_mean: Vec<f64>,
    pub grad_unit_sd: Vec<f64>,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn correlation(a: &[f64], b: &[f64], beta: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d / beta[k];
    }
    (-s).exp()
}

fn factorize(scaled: &[Vec<f64>], beta: &[f64]) -> Option<Factor> {
    let l = scaled.len();
    let mut base = DMatrix::<f64>::identity(l, l);
    for i in 0..l {
        for j in 0..i {
            let r = correlation(&scaled[i], &scaled[j], beta);
            base[(i, j)] = r;
            base[(j, i)] = r;
        }
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = base.clone();
        for i in 0..l {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Some(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    None
}

struct Profile {
    mu: f64,
    sigma2: f64,
    alpha: DVector<f64>,
    neg_loglik: f64,
}

fn profile(factor: &Factor, y: &DVector<f64>, variance_floor: f64) -> Profile {
    let l = y.len();
    let ones = DVector::from_element(l, 1.0);
    let r_inv_one = factor.chol.solve(&ones);
    let r_inv_y = factor.chol.solve(y);
    let mu = ones.dot(&r_inv_y) / ones.dot(&r_inv_one);
    let resid = y - DVector::from_element(l, mu);
    let alpha = &r_inv_y - &r_inv_one * mu;
    let sigma2 = (resid.dot(&alpha) / l as f64).max(0.0);
    let ln_det: f64 = factor.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let neg_loglik = l as f64 * (sigma2 + variance_floor).ln() + ln_det;
    Profile { mu, sigma2, alpha, neg_loglik }
}

impl GpModel {
    pub fn fit(points: &[Vec<f64>], values: &[f64]) -> Result<Self, EamError> {
        Self::fit_with(points, values, &GpFitOptions::default())
    }

    pub fn fit_with(points: &[Vec<f64>], values: &[f64], opts: &GpFitOptions) -> Result<Self, EamError> {
        let l = points.len();
        if l < 2 || values.len() != l {
            return Err(EamError::DegenerateDesign(format!("need at least 2 points with values, got {l}")));
        }
        let p = points[0].len();
        if p == 0 || points.iter().any(|x| x.len() != p) {
            return Err(EamError::DegenerateDesign("inconsistent point dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EamError::DegenerateDesign("non-finite input".into()));
        }
        for i in 0..l {
            for j in 0..i {
                let d = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if d <= 1e-10 {
                    return Err(EamError::DegenerateDesign(format!("points {j} and {i} coincide")));
                }
            }
        }

        let (offset, scale): (Vec<f64>, Vec<f64>) = match &opts.scale_box {
            Some(b) => (b.lower.clone(), (0..p).map(|k| b.width(k)).collect()),
            None => (0..p)
                .map(|k| {
                    let lo = points.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
                    let hi = points.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
                    (lo, if hi > lo { hi - lo } else { 1.0 })
                })
                .unzip(),
        };
        let scaled: Vec<Vec<f64>> = points
            .iter()
            .map(|x| x.iter().enumerate().map(|(k, &v)| (v - offset[k]) / scale[k]).collect())
            .collect();
        let y = DVector::from_column_slice(values);
        let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / l as f64;
        let variance_floor = 1e-14 * (1.0 + mean_sq);

        let objective = |ln_beta: &[f64]| -> f64 {
            let beta: Vec<f64> = ln_beta.iter().map(|b| b.exp()).collect();
            match factorize(&scaled, &beta) {
                Some(f) => {
                    let nll = profile(&f, &y, variance_floor).neg_loglik;
                    if nll.is_finite() {
                        nll
                    } else {
                        f64::MAX
                    }
                }
                None => f64::MAX,
            }
        };
        let hyper_box = Bounds::new(vec![LN_BETA_MIN; p], vec![LN_BETA_MAX; p]).expect("fixed box");
        let starts: Vec<Vec<f64>> = match &opts.warm_start {
            Some(w) if w.len() == p => vec![w.clone()],
            _ => [0.1f64, 0.3, 1.0, 3.0, 10.0].iter().map(|b| vec![b.ln(); p]).collect(),
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in &starts {
            if !opts.optimize {
                best = Some((s.iter().map(|b| b.clamp(LN_BETA_MIN, LN_BETA_MAX)).collect(), 0.0));
                break;
            }
            let (x, v) = nelder_mead(objective, s, 1.0, &hyper_box, opts.max_evals_per_start, 1e-7);
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((x, v));
            }
        }
        let mut ln_beta = best.expect("at least one start").0;

        // Shrink lengthscales until the surrogate interpolates its training data.
        for _ in 0..40 {
            let beta: Vec<f64> = ln_beta.iter().map(|b| b.exp()).collect();
            if let Some(factor) = factorize(&scaled, &beta) {
                let prof = profile(&factor, &y, variance_floor);
                let model = GpModel {
                    points: points.to_vec(),
                    values: values.to_vec(),
                    offset: offset.clone(),
                    scale: scale.clone(),
                    scaled: scaled.clone(),
                    ln_beta: ln_beta.clone(),
                    mu: prof.mu,
                    sigma2: prof.sigma2,
                    jitter: factor.jitter,
                    chol: factor.chol,
                    alpha: prof.alpha,
                };
                if model.interpolates() {
                    return Ok(model);
                }
            }
            if ln_beta.iter().all(|&b| b <= LN_BETA_MIN) {
                break;
            }
            for b in ln_beta.iter_mut() {
                *b = (*b - std::f64::consts::LN_2).max(LN_BETA_MIN);
            }
        }
        Err(EamError::IllConditioned)
    }

    fn interpolates(&self) -> bool {
        self.points.iter().zip(&self.values).all(|(x, &v)| {
            let pr = self.predict_full(x, false);
            (pr.mean - v).abs() <= INTERPOLATION_MEAN_TOL * (1.0 + v.abs()) && pr.unit_sd <= INTERPOLATION_SD_TOL
        })
    }

    fn scale_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, &v)| (v - self.offset[k]) / self.scale[k]).collect()
    }

    fn predict_full(&self, x: &[f64], with_grad: bool) -> Prediction {
        let p = x.len();
        let u = self.scale_input(x);
        let beta: Vec<f64> = self.ln_beta.iter().map(|b| b.exp()).collect();
        let l = self.scaled.len();
        let r = DVector::from_iterator(l, self.scaled.iter().map(|s| correlation(&u, s, &beta)));
        let mean = self.mu + r.dot(&self.alpha);
        let v = self.chol.solve(&r);
        let s2 = (1.0 - r.dot(&v)).max(0.0);
        let unit_sd = s2.sqrt();
        let (mut grad_mean, mut grad_unit_sd) = (vec![0.0; p], vec![0.0; p]);
        if with_grad {
            for (i, s) in self.scaled.iter().enumerate() {
                for k in 0..p {
                    let dr = r[i] * (-2.0 * (u[k] - s[k]) / beta[k]) / self.scale[k];
                    grad_mean[k] += self.alpha[i] * dr;
                    grad_unit_sd[k] += -2.0 * v[i] * dr;
                }
            }
            for g in grad_unit_sd.iter_mut() {
                *g = if unit_sd > 1e-12 { *g / (2.0 * unit_sd) } else { 0.0 };
            }
        }
        Prediction { mean, unit_sd, grad_mean, grad_unit_sd }
    }

    /// Posterior mean `c_L(x)` and posterior sd.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let pr = self.predict_full(x, false);
        (pr.mean, pr.unit_sd * self.sigma2.sqrt())
    }

    pub fn predict_with_gradient(&self, x: &[f64]) -> Prediction {
        self.predict_full(x, true)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Lengthscales `β` in unit-box coordinates.
    pub fn lengthscales(&self) -> Vec<f64> {
        self.ln_beta.iter().map(|b| b.exp()).collect()
    }

    pub fn ln_lengthscales(&self) -> &[f64] {
        &self.ln_beta
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::latin_hypercube;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_data_gives_constant_mean() {
        let gp = GpModel::fit(&[vec![0.0], vec![1.0]], &[2.5, 2.5]).unwrap();
        for i in 0..=10 {
            let (m, _) = gp.predict(&[i as f64 / 10.0]);
            assert!((m - 2.5).abs() < 1e-6, "{m}");
        }
    }

    #[test]
    fn recovers_sine_on_grid() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
        let gp = GpModel::fit(&xs, &ys).unwrap();
        let worst = (0..100)
            .map(|i| {
                let x = i as f64 / 99.0;
                (gp.predict(&[x]).0 - (3.0 * x).sin()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let xs = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1], vec![0.1, 0.1]];
        let ys = vec![1.0, 2.0, 0.5, 1.5];
        let gp = GpModel::fit(&xs, &ys).unwrap();
        let (m, s) = gp.predict(&[1e4, 1e4]);
        assert!((m - gp.mu()).abs() < 1e-9);
        assert!((s - gp.sigma()).abs() < 1e-9 * gp.sigma().max(1.0));
    }

    #[test]
    fn duplicates_rejected() {
        let e = GpModel::fit(&[vec![0.0], vec![0.0]], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(e, EamError::DegenerateDesign(_)));
    }

    #[test]
    fn permutation_invariance() {
        let b = Bounds::symmetric(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = latin_hypercube(&b, 15, &mut rng);
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[0] - x[1]).collect();
        let opts = GpFitOptions { scale_box: Some(b.clone()), ..Default::default() };
        let gp1 = GpModel::fit_with(&xs, &ys, &opts).unwrap();
        let mut order: Vec<usize> = (0..15).collect();
        order.reverse();
        let xs2: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
        let ys2: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let warm = GpFitOptions { warm_start: Some(gp1.ln_lengthscales().to_vec()), optimize: false, ..opts };
        let gp2 = GpModel::fit_with(&xs2, &ys2, &warm).unwrap();
        // Same hyperparameters, permuted data.
        let gp1b = GpModel::fit_with(&xs, &ys, &warm).unwrap();
        for probe in [[0.3, -0.2], [0.9, 0.9], [-0.5, 0.1]] {
            let (a, sa) = gp1b.predict(&probe);
            let (c, sc) = gp2.predict(&probe);
            assert!((a - c).abs() < 1e-10 && (sa - sc).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = Bounds::symmetric(3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = latin_hypercube(&b, 20, &mut rng);
        let ys: Vec<f64> = xs.iter().map(|x| (x[0] + 2.0 * x[1]).cos() + x[2]).collect();
        let gp = GpModel::fit_with(&xs, &ys, &GpFitOptions { scale_box: Some(b), ..Default::default() }).unwrap();
        let x = [0.13, -0.41, 0.27];
        let pr = gp.predict_with_gradient(&x);
        for k in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let a = gp.predict_with_gradient(&xp);
            let c = gp.predict_with_gradient(&xm);
            let dm = (a.mean - c.mean) / (2.0 * h);
            let ds = (a.unit_sd - c.unit_sd) / (2.0 * h);
            assert!((dm - pr.grad_mean[k]).abs() < 1e-4 * (1.0 + dm.abs()), "{dm} {}", pr.grad_mean[k]);
            assert!((ds - pr.grad_unit_sd[k]).abs() < 1e-4 * (1.0 + ds.abs()), "{ds} {}", pr.grad_unit_sd[k]);
        }
    }
}
