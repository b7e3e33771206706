//! Concept erasure for diffusion models by pruning "skilled" weight neurons
//! of the second feed-forward projection.
//!
//! Pipeline: [`stats::record`] hidden-activation statistics for paired
//! target/reference conditions, score `W2` with Wanda importance
//! ([`scoring`]), keep the per-row top-k% whose target score beats the
//! reference score ([`mask`]), OR the masks over the earliest denoising steps,
//! and zero the selected weights ([`surgery`]). A toy 2-D diffusion model
//! ([`diffusion`]) and an oracle-based evaluator ([`eval`]) make the whole
//! loop testable on a CPU.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod mask;
pub mod par;
pub mod scoring;
pub mod stats;
pub mod surgery;
pub mod tensor;

mod header;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
