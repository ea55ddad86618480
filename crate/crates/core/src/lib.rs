//! Cross-modal self-supervised pre-training for multimodal time series.
//!
//! Each modality has its own 1-D convolutional encoder. A shared aggregator
//! fuses the stacked intermediate embeddings into one global embedding.
//! Pre-training compares two latent-masked views with a variance, invariance
//! and covariance objective. A linear head is then trained on labels, either
//! on frozen features or with fine-tuning.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod masking;
pub mod model;
pub mod numkernel;
pub mod parallel;
pub mod train;

pub use error::{Error, Result};
