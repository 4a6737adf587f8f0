//! Trainable product-quantization retrieval.
//!
//! An MLP encoder maps inputs to embeddings, a set of product-quantization
//! codebooks soft-quantizes them during training, and a self-supervised
//! objective over two augmented views of each input trains both end to end.
//! At index time embeddings are hard-quantized to bit-packed codes and
//! searched by asymmetric distance.

mod binio;
pub mod config;
pub mod data;
pub mod encoder;
pub mod index;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod quantizer;
pub mod trainer;

pub use config::SscqConfig;
pub use error::{Error, Result};
