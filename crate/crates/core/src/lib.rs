//! COVT: a convolutional stem with a multi-rate atrous pyramid feeding a
//! vision transformer whose MLP blocks add an average-pooled global branch.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`]; the
//! [`verify`] module holds the independent oracles used by the test suites.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Context, Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub mod data;
pub mod model;
pub mod nn;
pub mod params;
pub mod stem;
pub mod train;
pub mod transformer;
pub mod verify;
