//! Hierarchical bi-directional feature perception for re-identification
//! style retrieval, built on a small f64 autodiff engine.

pub mod bfp;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradsuite;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod pooling;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
