//! Adaptive sparse graph networks for spatiotemporal forecasting on
//! heterogeneous observation streams.
//!
//! The crate learns which sensors should talk to which grid locations:
//! candidate edges come from spatial proximity, and a trainable sampler
//! keeps only the connections that help the forecast, with a per-node
//! connection budget that is itself learned. Encoding is graph
//! convolution over the sampled structure followed by a recurrent
//! aggregation over the input window.
//!
//! It ships with a small advection-diffusion simulator so the full
//! train / evaluate / ablate loop runs end to end without external data.

pub mod error;
pub mod cli;
pub mod datamodel;
pub mod encoder;
pub mod eval;
pub mod graphbuild;
pub mod model;
pub mod noise;
pub mod structlearn;
pub mod synthgen;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
