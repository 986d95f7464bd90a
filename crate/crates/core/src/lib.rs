//! Modal-contextualized prompt tuning for transformers with missing modalities.

pub mod backbone;
pub mod collections;
pub mod dataset;
pub mod error;
pub mod instantiation;
pub mod mcp;
pub mod nm2i;
pub mod seed;
pub mod tuner;

pub use error::{Error, Result};
