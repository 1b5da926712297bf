//! Modular capsule routing network for visual question answering, with a
//! small reverse-mode autodiff engine, a synthetic planted-rule task, and a
//! trainer.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod modules;
pub mod network;
pub mod params;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use params::{Architecture, Dims, ModelParams, ModuleKind};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
