//! Dynamically partitioned softmax output heads for language models.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod params;
pub mod partition;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
