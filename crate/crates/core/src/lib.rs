//! Diffusion-model alignment toolkit for Gaussian-mixture priors.
//!
//! The forward process is a variance-preserving SDE ([`sde`]). For mixture priors every quantity of
//! interest has a closed form ([`analytic`]): marginals, scores, reward tilts, posteriors over `x0`
//! and the optimal control. On top of those sit drift blending ([`blend`]), the gap analysis
//! ([`jensen`]), learned scores ([`score_fit`]), guidance and search baselines ([`baselines`]) and
//! sample-based evaluation ([`metrics`]).

pub mod analytic;
pub mod baselines;
pub mod blend;
pub mod drift;
pub mod error;
pub mod jensen;
pub mod metrics;
pub mod quadrature;
pub mod rewards;
pub mod rng;
pub mod score_fit;
pub mod sde;

pub use error::{Error, Result};

/// Crate version, recorded in run outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
