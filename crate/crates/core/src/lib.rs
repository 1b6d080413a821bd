//! Noise-aware Bayesian optimization of extrusion parameters across a fleet
//! of nominally identical 3D printers.
//!
//! The crate covers the whole workflow: ingesting repeated weight
//! measurements, characterizing per-device noise, comparing devices with
//! divergence metrics and clustering, deciding between a shared or
//! per-device optimization strategy, and running the Bayesian optimization
//! campaign itself against real or simulated devices.

pub mod acquisition;
pub mod campaign;
pub mod cli;
pub mod clustering;
pub mod decision;
pub mod divergence;
pub mod domain;
pub mod error;
pub mod gp;
mod optimize;
pub mod report;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
