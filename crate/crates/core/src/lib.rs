//! Core numerics for repurposing a frozen patch-transformer forecaster into a
//! multi-dataset time-series classifier.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command-line tool
//! and report rendering live in the `formed` crate.
#![no_std]

extern crate alloc;

pub mod backbone;
pub mod classifier;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod registry;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{Module, Parameter};
pub use tape::{AttnMask, Gradients, Graph, Var};
pub use tensor::{DType, Real, Tensor};
