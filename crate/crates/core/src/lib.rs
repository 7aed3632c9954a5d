//! Encoder-as-generator question generation over text and object regions.

pub mod config;
pub mod data;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod multimodal;
pub mod numerics;
pub mod probe;
pub mod training;

pub use error::{Error, ErrorKind, Result};

/// Index into the vocabulary.
pub type TokenId = u32;
