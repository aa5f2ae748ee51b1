//! 2D selective-scan state-space kernels and a bi-temporal change-detection
//! network built on them.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod scan1d;
pub mod scan2d;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
