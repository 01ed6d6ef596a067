//! Physics-guided NOx emission modelling from vehicle OBD telemetry.
//!
//! The pipeline derives combustion features from raw OBD channels, fits a
//! global power law, finds time windows where that fit diverges, mines the
//! attribute patterns that co-occur with divergence, and refits the power
//! law per pattern partition.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergence;
pub mod error;
pub mod harness;
pub mod miner;
pub mod obd;
pub mod physics;
pub mod pstva;
pub mod regression;
mod scalar;
pub mod series;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};

pub type PowerLawParams32 = regression::PowerLawParams<f32>;
pub type PowerLawParams64 = regression::PowerLawParams<f64>;
pub type FeatureSeries32 = physics::FeatureSeries<f32>;
pub type FeatureSeries64 = physics::FeatureSeries<f64>;
pub type Metrics32 = regression::Metrics<f32>;
pub type Metrics64 = regression::Metrics<f64>;
pub type PartitionedModel32 = pstva::PartitionedModel<f32>;
pub type PartitionedModel64 = pstva::PartitionedModel<f64>;
