//! The guide's chapters, compiled so that `cargo test --doc` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/mixtures.md")]
pub mod mixtures {}
#[doc = include_str!("../../../book/src/tilting.md")]
pub mod tilting {}
#[doc = include_str!("../../../book/src/blending.md")]
pub mod blending {}
#[doc = include_str!("../../../book/src/gap.md")]
pub mod gap {}
#[doc = include_str!("../../../book/src/learned-scores.md")]
pub mod learned_scores {}
#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
