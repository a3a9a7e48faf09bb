//! Source-guided node-level diffusion for predicting one morphological brain
//! graph from another.
//!
//! Pipeline: [`braingraph`] builds graphs from cortical tables, [`schedule`]
//! defines the forward process, [`denoiser`] predicts noise, [`trainer`] fits it,
//! [`sampler`] runs the reverse chain and [`evalmetrics`] scores predictions.

pub mod braingraph;
pub mod checkpoint;
pub mod cli;
pub mod denoiser;
pub mod diff;
pub mod error;
pub mod evalmetrics;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
