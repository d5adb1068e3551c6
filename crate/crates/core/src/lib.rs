//! Chest X-ray classification toolkit: dataset ingestion and splitting,
//! image statistics, small CNN and transfer-head models trained from
//! scratch, metrics, a two-stage (normal vs disease, then disease type)
//! cascade, and an experiment harness.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual choices.

pub mod cascade;
pub mod dataio;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synthetic;

pub use scalar::Scalar;

/// Trained model in single precision, as produced by the harness.
pub type Model = model::TrainedModel<f32>;
/// Double-precision model, used for gradient checks.
pub type Model64 = model::TrainedModel<f64>;
pub type Net = model::Network<f32>;
pub type Net64 = model::Network<f64>;
pub type Report = metrics::ClassificationReport<f64>;
pub type MetricRow = metrics::MetricRow<f64>;
pub type Tensors = model::TensorSet<f32>;
