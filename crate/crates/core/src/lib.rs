//! Geometry, synthetic world, dataset layout and evaluation metrics for
//! multi-camera bird's-eye-view map prediction.

pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod synthworld;
