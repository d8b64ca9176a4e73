use thiserror::Error;

/// Errors reported by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain { what: &'static str, value: f64, domain: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("tilt diverges for component {component}: {reason}")]
    TiltDiverges { component: usize, reason: String },

    #[error("non-finite drift at t = {t}, x = {x:?}")]
    NonFiniteDrift { t: f64, x: Vec<f64> },

    #[error("reward returned a non-finite value at x = {x:?}")]
    NonFiniteReward { x: Vec<f64> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("too few Monte Carlo draws: got {got}, need at least {min}")]
    InsufficientDraws { got: usize, min: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("r-grid covers {coverage:.6} of the conditional reward mass, need at least {required}")]
    InsufficientCoverage { coverage: f64, required: f64 },

    #[error("linear solve failed: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
