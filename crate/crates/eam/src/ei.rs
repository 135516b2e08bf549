//! Constrained expected improvement `(f - y*)_+ · (1 - Φ((g - c_L) / (σ̂ s_L)))`.

use crate::gp::GpModel;
use crate::normal;

/// Posterior sd below which the feasibility factor becomes an indicator.
pub const SD_FLOOR: f64 = 1e-12;

pub fn expected_improvement(model: &GpModel, x: &[f64], f_value: f64, g_value: f64, y_star: f64) -> f64 {
    let gain = f_value - y_star;
    if gain <= 0.0 {
        return 0.0;
    }
    let (mean, sd) = model.predict(x);
    gain * feasibility_probability(g_value, mean, sd)
}

pub fn feasibility_probability(g_value: f64, mean: f64, sd: f64) -> f64 {
    if sd <= SD_FLOOR {
        if g_value <= mean { 1.0 } else { 0.0 }
    } else {
        1.0 - normal::cdf((g_value - mean) / sd)
    }
}

/// `ln EI` without gradient; see [`log_ei_with_gradient`].
pub fn log_ei(model: &GpModel, x: &[f64], f_value: f64, g_value: f64, y_star: f64) -> f64 {
    let mut value = 0.0;
    if y_star.is_finite() {
        let gain = f_value - y_star;
        if gain <= 0.0 {
            return f64::NEG_INFINITY;
        }
        value += gain.ln();
    }
    let (mean, sd) = model.predict(x);
    if sd <= SD_FLOOR {
        return if g_value <= mean { value } else { f64::NEG_INFINITY };
    }
    value + normal::ln_upper_tail((g_value - mean) / sd)
}

/// `ln EI` and its gradient; `-inf` where EI vanishes. With no feasible incumbent
/// (`y_star = -inf`) the gain factor is dropped and only the feasibility probability is used.
pub fn log_ei_with_gradient(
    model: &GpModel,
    x: &[f64],
    f_value: f64,
    grad_f: &[f64],
    g_value: f64,
    grad_g: &[f64],
    y_star: f64,
) -> (f64, Vec<f64>) {
    let p = x.len();
    let mut grad = vec![0.0; p];
    let mut value = 0.0;
    if y_star.is_finite() {
        let gain = f_value - y_star;
        if gain <= 0.0 {
            return (f64::NEG_INFINITY, grad);
        }
        value += gain.ln();
        for k in 0..p {
            grad[k] += grad_f[k] / gain;
        }
    }
    let pr = model.predict_with_gradient(x);
    let sigma = model.sigma();
    let sd = sigma * pr.unit_sd;
    if sd <= SD_FLOOR {
        if g_value > pr.mean {
            return (f64::NEG_INFINITY, grad);
        }
        return (value, grad);
    }
    let z = (g_value - pr.mean) / sd;
    value += normal::ln_upper_tail(z);
    let mills = normal::inverse_mills(z);
    for k in 0..p {
        let dz = (grad_g[k] - pr.grad_mean[k]) / sd - z * sigma * pr.grad_unit_sd[k] / sd;
        grad[k] -= mills * dz;
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> GpModel {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0, (i * i) as f64 / 25.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + x[0] - 0.5 * x[1]).collect();
        GpModel::fit(&xs, &ys).unwrap()
    }

    #[test]
    fn zero_without_gain() {
        let m = toy_model();
        assert_eq!(expected_improvement(&m, &[0.3, 0.3], 1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(&m, &[0.3, 0.3], 0.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn half_at_surrogate_boundary() {
        let m = toy_model();
        let x = [0.37, 0.61];
        let (mean, sd) = m.predict(&x);
        assert!(sd > 0.0);
        let ei = expected_improvement(&m, &x, 3.0, mean, 1.0);
        assert_eq!(ei, 2.0 * 0.5);
    }

    #[test]
    fn deep_feasibility_saturates() {
        assert!((feasibility_probability(-10.0, 0.0, 1.0) - 1.0).abs() < 1e-10);
        assert_eq!(feasibility_probability(0.1, 0.0, 0.0), 0.0);
        assert_eq!(feasibility_probability(-0.1, 0.0, 0.0), 1.0);
    }

    #[test]
    fn log_gradient_matches_finite_differences() {
        let m = toy_model();
        let f = |x: &[f64]| 2.0 * x[0] + x[1];
        let g = |x: &[f64]| x[0] * x[0] + 3.0 * x[1] * x[1];
        let x = [0.42, 0.33];
        let (v, grad) = log_ei_with_gradient(&m, &x, f(&x), &[2.0, 1.0], g(&x), &[2.0 * x[0], 6.0 * x[1]], 0.5);
        assert!(v.is_finite());
        for k in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let vp = log_ei_with_gradient(&m, &xp, f(&xp), &[2.0, 1.0], g(&xp), &[2.0 * xp[0], 6.0 * xp[1]], 0.5).0;
            let vm = log_ei_with_gradient(&m, &xm, f(&xm), &[2.0, 1.0], g(&xm), &[2.0 * xm[0], 6.0 * xm[1]], 0.5).0;
            let fd = (vp - vm) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-4 * (1.0 + fd.abs()), "{fd} {}", grad[k]);
        }
        let ei = expected_improvement(&m, &x, f(&x), g(&x), 0.5);
        assert!((ei.ln() - v).abs() < 1e-9);
    }
}
