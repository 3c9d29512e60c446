//! End-to-end trainable plane-sweep multiview stereo.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: pinhole cameras, plane hypotheses, warp grids
//! - [`tensor`]: a small f64 tensor engine with reverse-mode gradients
//! - [`network`]: feature extraction, cost volumes, aggregation, regression
//! - [`trainer`]: loss, ADAM, the training loop
//! - [`metrics`]: depth-error, confidence and photometric measures
//! - [`data`]: synthetic scenes and file formats

pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
