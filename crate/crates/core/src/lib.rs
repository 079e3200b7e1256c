//! Conditional optimal transport for conditional sampling and density
//! estimation: a static map given by the gradient of a partially convex
//! potential, and a dynamic OT-regularized flow driven by a learned value
//! function.
//!
//! The crate is `no_std` (with `alloc`). File formats, the experiment
//! harness, and the command line live in the `cotlab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod cot;
pub mod data;
pub mod error;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pcp;
pub mod potentials;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::{Shape, Tensor};
