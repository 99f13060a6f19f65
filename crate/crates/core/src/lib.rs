//! A from-scratch dialogue state tracker built on a global-locally
//! self-attentive encoder: per-slot-value binary scoring over an ontology,
//! joint-goal accumulation across turns, a minimal reverse-mode autodiff
//! substrate with Adam, a synthetic corpus generator, and an evaluation
//! harness with frequency-bucketed F1.

pub mod adam;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scoring;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod vocab;

pub use error::{DstError, Result};
