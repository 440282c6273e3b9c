//! Minimal dense numerics for small transformer training on the CPU.
//!
//! * [`Tensor`]: row-major storage, generic over `f32`/`f64`.
//! * [`Graph`]: a reverse-mode tape over tensor-level primitives.
//! * [`ParamStore`] and [`AdamState`]: named parameters and their optimizer.
//!
//! Broadcasting is limited to leading axes ([`Graph::add_suffix`],
//! [`Graph::mul_suffix`]); anything else needs an explicit reshape or
//! [`Graph::repeat_tokens`].

mod adam;
mod error;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
