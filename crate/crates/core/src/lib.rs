//! Cross-view video-to-shop retrieval: shared patch-transformer encoders,
//! a pairwise matching decoder, patch feature reconstruction, synthetic data,
//! training and rank-k evaluation.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod reconstruction;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
