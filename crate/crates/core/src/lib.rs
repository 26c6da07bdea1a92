//! Few-shot adaptation of block-structured dual encoders.
//!
//! The crate covers partial finetuning under top-k freeze plans, retrieval
//! augmentation from a captioned corpus, feature-space PGD perturbation, the
//! two-stage retrieval-then-adversarial recipe, and an ID/OOD evaluation
//! harness over a synthetic distribution-shift benchmark.

pub mod adversarial;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod retrieval;

pub use error::{Error, Result};
