//! Whole-network traffic estimation from sparse stationary detectors.
//!
//! The crate covers the full chain: a directed road network with link
//! hierarchies, detector data aggregated to links, coverage sampling,
//! uniform and hierarchy-aware scaling to network means, variogram-based
//! kriging on network distances, MFD fitting and accuracy evaluation, and a
//! synthetic scenario generator with an experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod geostat;
pub mod mfd;
pub mod network;
pub mod scaling;
pub mod sensing;
pub mod stats;
pub mod synth;
pub mod table;

pub use error::{Error, ErrorClass, Result};
