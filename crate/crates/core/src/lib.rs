//! Simulator for per-chunk velocity reuse and budgeted KV compression in
//! autoregressive chunked flow-matching denoisers.
//!
//! The synthetic denoiser in [`armodel`] has a closed-form optimal velocity
//! field, so every cache decision can be checked against exact dynamics.

pub mod armodel;
pub mod chunkcache;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod numerics;
pub mod schedule;
mod serde_ext;

pub use armodel::{run_denoise, run_denoise_with_latents, RunOutcome, RunSetup};
pub use error::{Error, Result};
pub use metrics::RunTrace;
pub use numerics::Tensor;
pub use schedule::PowerLawSchedule;
