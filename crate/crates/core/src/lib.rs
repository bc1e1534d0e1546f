//! Transformer-kernel re-ranking with local self-attention, saturated
//! kernel-pooling and region selection over long documents.

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod scoring;
pub mod synthetic;
pub mod text;
pub mod train;

pub use error::{Result, TklError};
pub use model::{Model, ModelConfig, ModelParameters};
