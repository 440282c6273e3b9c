//! Jigsaw puzzle solving by diffusion over positional encodings.
//!
//! Pieces are tokens of a transformer that denoises the sinusoidal code of
//! each piece's slot. Solving samples codes from noise and matches each
//! estimate to the nearest unused true code. Masked puzzles also diffuse the
//! content of withheld pieces, so the solver both places and generates them.

pub mod assignment;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod oracles;
pub mod posenc;
pub mod puzzlekit;
pub mod trainer;

pub use error::{Error, Result};
