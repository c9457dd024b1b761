//! Transformer autoencoder laboratory for decoder-binding experiments.
//!
//! Iso-architectural models that differ only by seed are trained on the same
//! identity corpus; their encoder memories decode with their own decoder and
//! collapse to chance under any other.

pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod model;
pub mod registry;
pub mod tensor;
pub mod threat;
pub mod train;

pub use error::{Error, Result};
