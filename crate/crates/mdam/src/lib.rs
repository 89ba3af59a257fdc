//! Power-spectrum evolution modeling for multi-span optical links.
//!
//! The crate couples a synthetic link simulator (the ground-truth oracle)
//! with a sequence model that predicts, component by component, how a launch
//! spectrum evolves across a chain of boosters, fiber spans, preamps and
//! WSS nodes. Training, transfer to new hardware, a per-device cascade
//! baseline, and evaluation reports are all driven from the `mdam` binary.

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod dataio;
pub mod domain;
pub mod error;
pub mod eval;
pub mod linksim;
pub mod model;
pub mod rng;
pub mod training;
pub mod transfer;

pub use error::{MdamError, Result};
