//! Two-stage codec language model: text is mapped to deduplicated semantic
//! tokens, then to multi-codebook acoustic tokens laid out with a delay
//! pattern, with classifier-free guidance on both stages at inference.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod delay;
pub mod error;
pub mod inference;
pub mod nn;
pub mod records;
pub mod seed;
pub mod text;
pub mod training;
pub mod vocab;

pub use candle_core::DType;
pub use error::{Error, Result};
