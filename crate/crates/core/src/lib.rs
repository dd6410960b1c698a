//! UAV type classification from PX4 flight logs.
//!
//! The pipeline runs ULog parsing ([`ulog`]), feature selection and assembly
//! ([`features`]), fixed-length resampling ([`resample`]), class rebalancing
//! ([`rebalance`]), a many-to-one LSTM classifier ([`lstm`], [`train`]) and
//! k-fold evaluation ([`eval`], [`report`]). [`synth`] generates labelled
//! flights for desk-scale runs and [`pipeline`] ties the stages together.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bytes;

pub mod cache;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod lstm;
pub mod pipeline;
pub mod rebalance;
pub mod report;
pub mod resample;
pub mod synth;
pub mod train;
pub mod ulog;

pub use dataset::{ClassCounts, Dataset};
pub use features::{FeatureKey, FeatureSubset};
pub use resample::{SampledInstance, SamplingConfig, SamplingMethod};
pub use ulog::{FlightLog, TopicSeries, VehicleType};
