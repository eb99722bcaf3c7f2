//! Unsupervised image segmentation built on a pluggable diffusion backend.
//!
//! The pipeline clusters low-resolution cross-attention query features into
//! masks, then lifts each mask to image resolution by measuring how pixels
//! respond to a localized modulation of the feature maps during denoising.
//! Evaluation covers Hungarian-matched mIoU, class-mean mIoU, and
//! open-vocabulary mask classification against text embeddings.

pub mod backend;
pub mod correspondence;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod lowres;
pub mod mask;
pub mod pipeline;

pub use error::{Error, Result};
