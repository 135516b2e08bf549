//! Quantiles, CDFs and Kolmogorov–Smirnov distances.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{CoreError, Result};

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(CoreError::InvalidInput(format!("probability {p} outside (0, 1)")))
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    uvi_eam::normal::cdf(x)
}

pub fn normal_quantile(p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(Normal::standard().inverse_cdf(p))
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof as f64 / 2.0, x / 2.0)
    }
}

fn chi2_pdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = dof as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse χ² CDF by safeguarded Newton iteration from a Wilson–Hilferty start.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    check_probability(p)?;
    if dof == 0 {
        return Err(CoreError::InvalidInput("χ² needs dof >= 1".into()));
    }
    let k = dof as f64;
    let z = normal_quantile(p)?;
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    for _ in 0..200 {
        let f = chi2_cdf(dof, x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / chi2_pdf(dof, x);
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-14 * x.max(1e-300) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// `sup |F_n - F|` between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut x: Vec<f64> = a.to_vec();
    let mut y: Vec<f64> = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Order statistic at rank `ceil(level (B + 1))`, clamped to `[1, B]`.
pub fn conservative_order_statistic(sorted: &[f64], level: f64) -> f64 {
    let b = sorted.len();
    let rank = ((level * (b as f64 + 1.0)) - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, b) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_symmetry_and_center() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        let q = normal_quantile(0.975).unwrap();
        assert!((q - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.025).unwrap() + q).abs() < 1e-12);
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(0.0).is_err());
    }

    #[test]
    fn chi2_one_is_squared_normal() {
        for &p in &[0.1, 0.5, 0.9, 0.95, 0.99] {
            let z = normal_quantile((1.0 + p) / 2.0).unwrap();
            let q = chi2_quantile(1, p).unwrap();
            assert!((q - z * z).abs() <= 1e-8 * q, "{p}: {q} vs {}", z * z);
        }
    }

    #[test]
    fn chi2_four_at_95() {
        assert!((chi2_quantile(4, 0.95).unwrap() - 9.487729036781154).abs() < 1e-8);
    }

    #[test]
    fn chi2_round_trip() {
        for dof in [1usize, 2, 3, 9, 25, 100] {
            for &p in &[0.01, 0.3, 0.7, 0.999] {
                let q = chi2_quantile(dof, p).unwrap();
                assert!((chi2_cdf(dof, q) - p).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn order_statistic_rank() {
        let s: Vec<f64> = (1..=199).map(|i| i as f64).collect();
        assert_eq!(conservative_order_statistic(&s, 0.95), 190.0);
        assert_eq!(conservative_order_statistic(&s, 0.999), 199.0);
        let s: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        assert_eq!(conservative_order_statistic(&s, 0.9), 90.0);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        let u: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_statistic(&u, |x| x.clamp(0.0, 1.0)) <= 0.0005 + 1e-12);
    }
}
