//! Generative recursive reasoning: a recursive latent model whose high-level
//! updates carry learned Gaussian guidance, trained with a truncated
//! variational objective under deep supervision.

pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod oracles;
pub mod tasks;
pub mod trainer;

pub use error::{GramError, Result};
