//! Simulated critical values: Gaussian-counterpart quantiles on a frozen block of common random
//! numbers, Ornstein–Uhlenbeck functionals, and the closed-form normalizers `H` and `G`.

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dist::conservative_order_statistic;
use crate::error::{CoreError, Result};
use crate::linalg::{eigen_basis, is_symmetric, sym_sqrt, CONDITION_GATE};
use crate::rng;

pub const MIN_REPLICATIONS: usize = 99;
pub const EAM_REPLICATIONS: usize = 199;
pub const STANDALONE_REPLICATIONS: usize = 999;
/// Share of failed replicas tolerated before a quantile is refused.
pub const MAX_FAILED_SHARE: f64 = 0.01;
/// Blocks up to this many deviates are held in memory; larger ones are regenerated per replica.
pub const MATERIALIZE_LIMIT: usize = 1 << 23;
pub const CACHE_ENV: &str = "UVI_CACHE_DIR";
const CACHE_MAGIC: &[u8; 8] = b"UVICRN01";
/// `c` used in place of `-∞` for a zero eigenvalue, per grid step.
pub const STATIONARY_CLAMP_PER_STEP: f64 = -50.0;

/// Frozen standard-normal deviates `ξ` for `B` replicas of length `n` in dimension `d`.
/// Replica `b` is drawn from its own stream, so the block is the same whether held in memory
/// or regenerated.
#[derive(Debug, Clone)]
pub struct QuantileSession {
    seed: u64,
    replications: usize,
    n: usize,
    d: usize,
    block: Option<Arc<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSamples {
    /// Statistics of the replicas that passed the condition gate, ascending.
    pub sorted: Vec<f64>,
    pub failed: usize,
}

impl QuantileSession {
    pub fn new(seed: u64, replications: usize, n: usize, d: usize) -> Result<Self> {
        let dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        Self::with_cache(seed, replications, n, d, dir.as_deref())
    }

    pub fn with_cache(seed: u64, replications: usize, n: usize, d: usize, cache_dir: Option<&Path>) -> Result<Self> {
        if replications < MIN_REPLICATIONS {
            return Err(CoreError::InvalidInput(format!("B = {replications} below {MIN_REPLICATIONS}")));
        }
        if n < 2 || d == 0 {
            return Err(CoreError::InvalidInput(format!("quantile session needs n >= 2 and d >= 1, got n = {n}, d = {d}")));
        }
        let mut s = QuantileSession { seed, replications, n, d, block: None };
        let total = replications * n * d;
        if total <= MATERIALIZE_LIMIT {
            let cached = cache_dir.and_then(|dir| s.read_cache(dir));
            let block = match cached {
                Some(b) => b,
                None => {
                    let b: Vec<f64> = (0..replications).flat_map(|r| s.generate(r)).collect();
                    if let Some(dir) = cache_dir {
                        s.write_cache(dir, &b);
                    }
                    b
                }
            };
            s.block = Some(Arc::new(block));
        }
        Ok(s)
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cache_file_name(&self) -> String {
        format!("crn-{:016x}-{}-{}-{}.bin", self.seed, self.replications, self.n, self.d)
    }

    fn generate(&self, replica: usize) -> Vec<f64> {
        let mut r = rng::stream(self.seed, rng::QUANTILE, &[replica as u64]);
        (0..self.n * self.d).map(|_| r.sample(StandardNormal)).collect()
    }

    fn read_cache(&self, dir: &Path) -> Option<Vec<f64>> {
        let bytes = std::fs::read(dir.join(self.cache_file_name())).ok()?;
        let count = self.replications * self.n * self.d;
        if bytes.len() != 8 + 8 * count || &bytes[..8] != CACHE_MAGIC {
            return None;
        }
        Some(bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn write_cache(&self, dir: &Path, block: &[f64]) {
        let mut bytes = Vec::with_capacity(8 + 8 * block.len());
        bytes.extend_from_slice(CACHE_MAGIC);
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let target = dir.join(self.cache_file_name());
        let tmp = dir.join(format!("{}.tmp{}", self.cache_file_name(), std::process::id()));
        if std::fs::create_dir_all(dir).is_ok() && std::fs::write(&tmp, bytes).is_ok() {
            let _ = std::fs::rename(&tmp, &target);
        }
    }

    /// Row-major `n × d` deviates of replica `b`.
    pub fn deviates(&self, b: usize) -> Cow<'_, [f64]> {
        match &self.block {
            Some(block) => {
                let len = self.n * self.d;
                Cow::Borrowed(&block[b * len..(b + 1) * len])
            }
            None => Cow::Owned(self.generate(b)),
        }
    }

    /// `t̃²_Γ` for every replica, driving `Y_t = Γ Y_{t-1} + Σ^{1/2} ξ_t`.
    pub fn tilde_t2_samples(&self, gamma: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<ReplicaSamples> {
        let d = self.d;
        if gamma.shape() != (d, d) || sigma.shape() != (d, d) {
            return Err(CoreError::InvalidInput(format!("expected {d}×{d} gamma and sigma")));
        }
        if !is_symmetric(sigma, 1e-10) || gamma.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput("sigma must be symmetric and inputs finite".into()));
        }
        let root = sym_sqrt(sigma);
        let g: Vec<f64> = (0..d * d).map(|k| gamma[(k / d, k % d)]).collect();
        let s: Vec<f64> = (0..d * d).map(|k| root[(k / d, k % d)]).collect();
        let values: Vec<Option<f64>> = (0..self.replications)
            .into_par_iter()
            .map(|b| replica_statistic(&self.deviates(b), &g, &s, self.n, d))
            .collect();
        let failed = values.iter().filter(|v| v.is_none()).count();
        let mut sorted: Vec<f64> = values.into_iter().flatten().collect();
        sorted.sort_by(f64::total_cmp);
        Ok(ReplicaSamples { sorted, failed })
    }

    /// Simulated `level` quantiles of `t̃²_Γ`, one per entry of `levels`, from one replica set.
    pub fn quantiles(&self, gamma: &DMatrix<f64>, sigma: &DMatrix<f64>, levels: &[f64]) -> Result<Vec<f64>> {
        for &l in levels {
            if !(l > 0.0 && l < 1.0) {
                return Err(CoreError::InvalidInput(format!("level {l} outside (0, 1)")));
            }
        }
        let samples = self.tilde_t2_samples(gamma, sigma)?;
        if samples.failed as f64 > MAX_FAILED_SHARE * self.replications as f64 || samples.sorted.is_empty() {
            return Err(CoreError::DegenerateReplications { failed: samples.failed, total: self.replications });
        }
        Ok(levels.iter().map(|&l| conservative_order_statistic(&samples.sorted, l)).collect())
    }

    pub fn quantile(&self, gamma: &DMatrix<f64>, sigma: &DMatrix<f64>, level: f64) -> Result<f64> {
        Ok(self.quantiles(gamma, sigma, &[level])?[0])
    }
}

/// `tr(A B⁻¹ Aᵀ)` with `A = Σ ξ_t Y_{t-1}ᵀ`, `B = Σ Y_{t-1} Y_{t-1}ᵀ`; `None` when `B` fails the
/// condition gate.
fn replica_statistic(xi: &[f64], g: &[f64], s: &[f64], n: usize, d: usize) -> Option<f64> {
    let mut y = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut e = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    let mut bm = vec![0.0; d * d];
    for t in 0..n {
        let xt = &xi[t * d..(t + 1) * d];
        // Y_{t-1} is `y`; accumulate before stepping.
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] += xt[i] * y[j];
            }
            for j in 0..=i {
                bm[i * d + j] += y[i] * y[j];
            }
        }
        for i in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += s[i * d + k] * xt[k];
            }
            e[i] = acc;
        }
        for i in 0..d {
            let mut acc = e[i];
            for k in 0..d {
                acc += g[i * d + k] * y[k];
            }
            next[i] = acc;
        }
        std::mem::swap(&mut y, &mut next);
    }
    // Cholesky of the lower triangle of `bm`.
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = bm[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(acc > 0.0) || !acc.is_finite() {
                    return None;
                }
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    let diag: Vec<f64> = (0..d).map(|i| l[i * d + i]).collect();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if (hi / lo).powi(2) >= CONDITION_GATE {
        return None;
    }
    // tr(A B⁻¹ Aᵀ) = Σ_rows ‖L⁻¹ a_rowᵀ‖².
    let mut total = 0.0;
    let mut w = vec![0.0; d];
    for r in 0..d {
        for i in 0..d {
            let mut acc = a[r * d + i];
            for k in 0..i {
                acc -= l[i * d + k] * w[k];
            }
            w[i] = acc / l[i * d + i];
        }
        total += w.iter().map(|v| v * v).sum::<f64>();
    }
    total.is_finite().then_some(total)
}

/// Standalone request for a Gaussian-counterpart quantile.
#[derive(Debug, Clone)]
pub struct QuantileRequest {
    pub gamma: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
    pub level: f64,
    pub replications: usize,
    pub seed: u64,
}

pub fn simulate_tilde_t2_quantile(req: &QuantileRequest) -> Result<f64> {
    let session = QuantileSession::new(req.seed, req.replications, req.n, req.gamma.nrows())?;
    session.quantile(&req.gamma, &req.sigma, req.level)
}

/// Ornstein–Uhlenbeck family `dJ = C J dt + A dW` on `[0, 1]` with diagonal `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuConfig {
    /// Diagonal of `C`; `-∞` marks a zero eigenvalue.
    pub c: Vec<f64>,
    /// Diffusion loading `A`.
    pub sigma_half: DMatrix<f64>,
    pub grid_steps: usize,
}

impl OuConfig {
    pub fn new(c: Vec<f64>, sigma_half: DMatrix<f64>, grid_steps: usize) -> Result<Self> {
        let d = c.len();
        if d == 0 || sigma_half.shape() != (d, d) {
            return Err(CoreError::InvalidInput("C and the diffusion loading must have matching size".into()));
        }
        if grid_steps < 100 {
            return Err(CoreError::InvalidInput(format!("grid steps m = {grid_steps} below 100")));
        }
        if c.iter().any(|&v| v.is_nan() || v == f64::INFINITY || v > 0.0) {
            return Err(CoreError::InvalidInput("C entries must be <= 0".into()));
        }
        Ok(OuConfig { c, sigma_half, grid_steps })
    }

    /// `C = min(n log|λ_i|, 0)` in the real eigen-basis `F` of `Γ`, with loading `A = F⁻¹ Σ^{1/2}`.
    /// Eigenvalue phases are dropped; moduli above one are treated as unit roots.
    pub fn from_gamma(gamma: &DMatrix<f64>, sigma: &DMatrix<f64>, n: usize, grid_steps: usize) -> Result<Self> {
        let basis = eigen_basis(gamma).map_err(|e| CoreError::NonDiagonalSpectrum(e.to_string()))?;
        let f_inv = basis
            .basis
            .clone()
            .try_inverse()
            .ok_or_else(|| CoreError::NonDiagonalSpectrum("singular eigen-basis".into()))?;
        let c: Vec<f64> = basis
            .eigenvalues
            .iter()
            .map(|l| {
                let m = l.norm();
                if m == 0.0 { f64::NEG_INFINITY } else { n as f64 * m.ln() }
            })
            .collect();
        let c = c.into_iter().map(|v| v.min(0.0)).collect();
        OuConfig::new(c, f_inv * sym_sqrt(sigma), grid_steps)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `C` with `-∞` replaced by the stationary clamp `-50 m`.
    pub fn effective_c(&self) -> Vec<f64> {
        let clamp = STATIONARY_CLAMP_PER_STEP * self.grid_steps as f64;
        self.c.iter().map(|&v| if v.is_finite() { v.max(clamp) } else { clamp }).collect()
    }
}

fn kappa(c: f64, h: f64) -> f64 {
    if c.abs() * h < 1e-12 { h } else { (c * h).exp_m1() / c }
}

struct OuStep {
    decay: Vec<f64>,
    mean_gain: Vec<f64>,
    loading: Vec<f64>,
    residual_root: Vec<f64>,
    sqrt_h: f64,
    h: f64,
}

impl OuStep {
    fn new(cfg: &OuConfig) -> Self {
        let d = cfg.dim();
        let h = 1.0 / cfg.grid_steps as f64;
        let c = cfg.effective_c();
        let omega = &cfg.sigma_half * cfg.sigma_half.transpose();
        let k: Vec<f64> = c.iter().map(|&ci| kappa(ci, h)).collect();
        let resid = DMatrix::from_fn(d, d, |i, j| omega[(i, j)] * (kappa(c[i] + c[j], h) - k[i] * k[j] / h));
        let root = sym_sqrt(&resid);
        OuStep {
            decay: c.iter().map(|&ci| (ci * h).exp()).collect(),
            mean_gain: k.iter().map(|ki| ki / h).collect(),
            loading: (0..d * d).map(|q| cfg.sigma_half[(q / d, q % d)]).collect(),
            residual_root: (0..d * d).map(|q| root[(q / d, q % d)]).collect(),
            sqrt_h: h.sqrt(),
            h,
        }
    }
}

/// One path: returns `(∫ J dWᵀ, ∫ J Jᵀ dt)` as row-major `d × d` arrays.
fn ou_functionals<R: Rng>(step: &OuStep, d: usize, m: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut j = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut int_jdw = vec![0.0; d * d];
    let mut int_jj = vec![0.0; d * d];
    for _ in 0..m {
        for v in dw.iter_mut() {
            *v = step.sqrt_h * rng.sample::<f64, _>(StandardNormal);
        }
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..d {
            for b in 0..d {
                int_jdw[a * d + b] += j[a] * dw[b];
            }
        }
        for a in 0..d {
            let mut adw = 0.0;
            let mut res = 0.0;
            for k in 0..d {
                adw += step.loading[a * d + k] * dw[k];
                res += step.residual_root[a * d + k] * z[k];
            }
            next[a] = step.decay[a] * j[a] + step.mean_gain[a] * adw + res;
        }
        for a in 0..d {
            for b in 0..d {
                int_jj[a * d + b] += 0.5 * step.h * (j[a] * j[b] + next[a] * next[b]);
            }
        }
        std::mem::swap(&mut j, &mut next);
    }
    (int_jdw, int_jj)
}

fn trace_functional(i: &[f64], g: &[f64], d: usize) -> Option<f64> {
    let im = DMatrix::from_row_slice(d, d, i);
    let gm = DMatrix::from_row_slice(d, d, g);
    let chol = nalgebra::Cholesky::new(gm)?;
    let sol = chol.solve(&im);
    let v = (im.transpose() * sol).trace();
    v.is_finite().then_some(v.max(0.0))
}

/// `tr((∫J dWᵀ)ᵀ (∫J Jᵀ dt)⁻¹ ∫J dWᵀ)` for `B` independent paths, in replica order.
pub fn ou_t2_samples(cfg: &OuConfig, replications: usize, seed: u64) -> Result<Vec<f64>> {
    let d = cfg.dim();
    let step = OuStep::new(cfg);
    let values: Vec<Option<f64>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, "ou", &[b as u64]);
            let (i, g) = ou_functionals(&step, d, cfg.grid_steps, &mut r);
            trace_functional(&i, &g, d)
        })
        .collect();
    let failed = values.iter().filter(|v| v.is_none()).count();
    if failed as f64 > MAX_FAILED_SHARE * replications as f64 {
        return Err(CoreError::DegenerateReplications { failed, total: replications });
    }
    Ok(values.into_iter().flatten().collect())
}

pub fn simulate_ou_t2(cfg: &OuConfig, level: f64, replications: usize, seed: u64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CoreError::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    if replications < MIN_REPLICATIONS {
        return Err(CoreError::InvalidInput(format!("B = {replications} below {MIN_REPLICATIONS}")));
    }
    let mut s = ou_t2_samples(cfg, replications, seed)?;
    s.sort_by(f64::total_cmp);
    Ok(conservative_order_statistic(&s, level))
}

/// Monte Carlo mean of `∫ J Jᵀ dt`.
pub fn ou_gram_mean(cfg: &OuConfig, replications: usize, seed: u64) -> DMatrix<f64> {
    let d = cfg.dim();
    let step = OuStep::new(cfg);
    let total = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, "ou", &[b as u64]);
            ou_functionals(&step, d, cfg.grid_steps, &mut r).1
        })
        .reduce(|| vec![0.0; d * d], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    DMatrix::from_row_slice(d, d, &total) / replications as f64
}

/// `H = n⁻¹ Σ_{t=0}^{n-1} M_t` with `M_0 = 0`, `M_t = Γ M_{t-1} Γᵀ + Σ`.
pub fn compute_h(gamma: &DMatrix<f64>, sigma: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let d = gamma.nrows();
    if n == 0 || gamma.shape() != (d, d) || sigma.shape() != (d, d) {
        return Err(CoreError::InvalidInput("compute_h needs n >= 1 and matching square matrices".into()));
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut sum = DMatrix::<f64>::zeros(d, d);
    for _ in 1..n {
        m = gamma * &m * gamma.transpose() + sigma;
        sum += &m;
    }
    Ok(sum / n as f64)
}

/// `(e^s - 1)/s² - 1/s`, continuous at `s = 0` with value ½.
pub fn g_kernel(s: f64) -> f64 {
    if s.abs() < 1e-2 {
        // Σ_k s^k / (k + 2)!
        let mut term = 0.5;
        let mut total = 0.5;
        for k in 1..8 {
            term *= s / (k as f64 + 2.0);
            total += term;
        }
        total
    } else {
        (s.exp_m1() - s) / (s * s)
    }
}

/// `G_ij = Σ_ij g(c_i + c_j)`.
pub fn compute_g(c: &[f64], sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = c.len();
    if sigma.shape() != (d, d) || c.iter().any(|v| !v.is_finite() || *v > 0.0) {
        return Err(CoreError::InvalidInput("compute_g needs finite c <= 0 matching sigma".into()));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] * g_kernel(c[i] + c[j])))
}
