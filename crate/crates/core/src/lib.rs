//! Feature-diversity laboratory for self-supervised convolutional encoders.
//!
//! The crate trains small residual encoders with self-supervised objectives,
//! taps four named layers, measures the hyperspherical energy of the tapped
//! features and relates it to linear-probe error across sweeps of training
//! length, width, depth, norm kind and algorithm.

pub mod data;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
