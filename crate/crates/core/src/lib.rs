//! Parking violation rate prediction for on-street parking sectors.
//!
//! The pipeline turns enforcement scan sessions into per-(sector, hour slot)
//! violation-rate labels, encodes every cell as a 28-wide feature vector,
//! and fits a residual MLP with Adamax. [`synthgen`] produces calibrated
//! synthetic cities with known ground truth so the whole chain can be
//! exercised without proprietary scan data.

pub mod domain;
pub mod error;
pub mod featurize;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod labeling;
pub mod neuralnet;
pub mod pipeline;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
