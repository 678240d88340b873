//! Generic patch-Transformer time-series foundation model at desk scale.
//!
//! The pipeline runs series → [`preprocess`] (windowing, masks, contiguous
//! patch masking, mask-aware asinh normalization) → [`model`] (single-pass
//! encoder with a quantile head) → [`train`] (masked pinball loss, AdamW,
//! checkpoints). [`datagen`] produces synthetic pretraining corpora and
//! [`eval`] scores forecasts against Seasonal Naive.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod series;
pub mod train;

pub use error::{Error, Result};
pub use patchfm_tensor as tensor;
