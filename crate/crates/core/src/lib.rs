//! Computational-graph library for composite human activity recognition
//! from tri-axial accelerometer windows.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
