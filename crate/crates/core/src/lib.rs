//! Structure-aware mixture-of-experts layer with a two-stage training
//! lifecycle, plus the geometry and data-filtering utilities that feed it.
//!
//! The layer combines a dense global expert, a pool of narrow routed experts
//! selected per token by a noisy top-K gate over token, pooled-sequence and
//! landmark-offset features, and a low-rank expert per task. Task experts are
//! fitted from the residuals of isolated per-task models around their average.

pub mod error;
pub mod landmark;
pub mod lifecycle;
pub mod moe;
pub mod numerics;
pub mod pair_filter;
pub mod params;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use lifecycle::{assemble_unified, RankPolicy, StageOneBundle, TaskId, UnifiedModel};
pub use moe::MoeConfig;
pub use numerics::Matrix;
pub use params::Parameters;
