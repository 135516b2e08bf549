pub mod dist;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod quantiles;
pub mod rng;
