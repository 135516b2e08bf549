use thiserror::Error;
use uvi_eam::EamError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular moments: {0}")]
    SingularMoments(String),
    #[error("restriction matrix is rank deficient")]
    RankDeficient,
    #[error("matrix is not diagonalizable (relative residual {residual:.3e}, condition {condition:.3e})")]
    NonDiagonalizable { residual: f64, condition: f64 },
    #[error("eigenstructure unavailable for the Ornstein-Uhlenbeck map: {0}")]
    NonDiagonalSpectrum(String),
    #[error("no well-conditioned random basis after {0} draws")]
    SingularBasis(usize),
    #[error("{failed} of {total} replications failed the condition gate")]
    DegenerateReplications { failed: usize, total: usize },
    #[error("confidence region is empty")]
    EmptyRegion,
    #[error("optimizer budget exhausted")]
    OptimizerBudgetExhausted,
    #[error("assumption check failed: {0}")]
    AssumptionViolated(String),
    #[error("surrogate optimizer: {0}")]
    Eam(#[from] EamError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
