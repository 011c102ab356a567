//! Concept-aware control of image-conditioned attention in a deterministic toy
//! diffusion engine, plus the tooling to measure how well attention localizes.

pub mod analysis;
pub mod attention;
pub mod control;
pub mod engine;
pub mod error;
pub mod io;
pub mod numerics;

pub use error::{Error, Result};
