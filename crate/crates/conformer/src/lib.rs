//! End-to-end video referring-expression grounding: a transformer
//! encoder/decoder with content-conditioned queries, bi-partial matching
//! losses, and an entity-aware contrastive loss, built on a small f64
//! autodiff engine and trained on a deterministic synthetic corpus of
//! moving colored shapes.

pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
