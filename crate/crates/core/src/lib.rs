//! Synthetic industrial anomaly generation: defect proposal, image generation,
//! CLIP-style filtering, training-free mask creation, evaluation metrics,
//! downstream segmentation training and a pairwise human-study backend.

pub mod backend;
pub mod config;
pub mod downstream;
pub mod error;
pub mod filter;
pub mod genclient;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod maskgen;
pub mod metrics;
pub mod promptgen;
pub mod study;
pub mod tensor;

pub use error::{BackendError, Error, Result};
