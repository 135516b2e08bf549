//! Standard normal helpers with stable upper tails.

use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(u: f64) -> f64 {
    0.5 * erfc(-u * FRAC_1_SQRT_2)
}

/// `ln(1 - Φ(u))`, finite for every finite `u`.
pub fn ln_upper_tail(u: f64) -> f64 {
    if u < 25.0 {
        (0.5 * erfc(u * FRAC_1_SQRT_2)).ln()
    } else {
        let u2 = u * u;
        -0.5 * u2 - (u * (2.0 * PI).sqrt()).ln() + (1.0 - 1.0 / u2 + 3.0 / (u2 * u2)).ln()
    }
}

/// Inverse Mills ratio `φ(u) / (1 - Φ(u))`.
pub fn inverse_mills(u: f64) -> f64 {
    if u < 25.0 {
        pdf(u) / (0.5 * erfc(u * FRAC_1_SQRT_2))
    } else {
        let u2 = u * u;
        u + 1.0 / u - 2.0 / (u2 * u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tails_are_continuous_at_the_switch() {
        let below = ln_upper_tail(25.0 - 1e-9);
        let above = ln_upper_tail(25.0 + 1e-9);
        assert!((below - above).abs() < 1e-6 * below.abs());
        let mb = inverse_mills(25.0 - 1e-9);
        let ma = inverse_mills(25.0 + 1e-9);
        assert!((mb - ma).abs() < 1e-6 * mb);
    }

    #[test]
    fn cdf_symmetry() {
        for &u in &[0.0, 0.3, 1.7, 4.0] {
            assert!((cdf(u) + cdf(-u) - 1.0).abs() < 1e-15);
        }
        assert_eq!(cdf(0.0), 0.5);
    }
}
