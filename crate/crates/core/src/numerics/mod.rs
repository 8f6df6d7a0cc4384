//! Dense arrays, reverse-mode gradients, layers and seeded random streams.

pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use exec::Exec;
pub use layers::{gaussian_reparam, linear, AttentionBlock, Linear, ParamStore, RmsNorm, SwiGlu, SwiGluBlock};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DenseArray, Scalar, Tensor};
