//! Image completion with restrictive token embedding, visibility-weighted
//! transformer attention and an attention-aware refinement stage.

pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod params;
pub mod probe;
pub mod refine;

pub use error::{CheckpointError, Error, Result};
