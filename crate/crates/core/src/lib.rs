pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod nn;
pub mod csl;
pub mod sti;
pub mod model;
pub mod format;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod eval;
pub mod training;
pub mod config;
pub mod verify;
pub mod cli;
