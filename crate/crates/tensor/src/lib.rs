//! Minimal dense-tensor algebra for the prompt-tuning pipeline.
//!
//! Values are row-major `f64` buffers. Differentiable computation is recorded
//! on an explicit [`Graph`] (a Wengert tape); frozen forward passes use a
//! no-grad graph that keeps values but records no backward information.

mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub use kernels::{gelu, sigmoid};
