//! Experiment runner: TOML configs in, CSV tables, SVG charts and a `run.json` record out.

pub mod config;
pub mod error;
pub mod methods;
pub mod output;
pub mod plot;
pub mod runs;

pub use config::{ExperimentConfig, Method};
pub use error::{RunError, RunResult};
pub use output::{resolve_out_dir, RunOptions, RunRecord};
