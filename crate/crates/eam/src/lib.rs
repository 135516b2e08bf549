//! Surrogate-assisted maximization of a cheap objective under one expensive constraint.
//!
//! The problem is `max f(x)` subject to `g(x) <= c(x)` on a box, where `f` and `g` are cheap
//! and differentiable and `c` is expensive. [`eam_maximize`] evaluates `c` once per iteration,
//! approximates it with a Gaussian process ([`GpModel`]), and picks the next site by maximizing
//! the constrained expected improvement.

pub mod design;
pub mod eam;
pub mod ei;
pub mod gp;
pub mod local;
pub mod normal;

pub use eam::{eam_maximize, EamOptions, EamOutcome, EamRecord, Evaluation};
pub use ei::expected_improvement;
pub use gp::{GpFitOptions, GpModel};
pub use local::{maximize_cheap_constrained, CheapConstrainedOptions};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EamError {
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("kernel matrix could not be factorized even with maximal jitter")]
    IllConditioned,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, EamError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(EamError::InvalidBounds("dimension mismatch or empty box".into()));
        }
        for (k, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(EamError::InvalidBounds(format!("coordinate {k}: [{lo}, {hi}]")));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn symmetric(dim: usize, radius: f64) -> Result<Self, EamError> {
        Bounds::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (&lo, &hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    /// True when `x` lies within `rel` of a face, relative to the side length.
    pub fn touches_face(&self, x: &[f64], rel: f64) -> bool {
        x.iter().enumerate().any(|(k, &v)| {
            let tol = rel * self.width(k);
            v - self.lower[k] <= tol || self.upper[k] - v <= tol
        })
    }
}

/// Cheap part of a constrained problem: objective `f` and constraint function `g`.
pub trait ConstrainedObjective {
    fn dim(&self) -> usize;
    fn f(&self, x: &[f64]) -> f64;
    fn grad_f(&self, x: &[f64]) -> Vec<f64>;
    fn g(&self, x: &[f64]) -> f64;
    fn grad_g(&self, x: &[f64]) -> Vec<f64>;
}
