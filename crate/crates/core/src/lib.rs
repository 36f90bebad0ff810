pub mod config;
pub mod error;
pub mod guidance;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Real, Tensor};
pub mod diffusion;
pub mod eval;
pub mod models;
pub mod parallel;
pub mod pipeline;
pub mod selftest;
pub mod training;
pub mod world;
