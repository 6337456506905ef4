//! Event-stream dataset pipeline: configuration, extraction into a
//! three-table data model, pre-processing, and the sparse per-subject
//! representation consumed by the model crate.

pub mod build;
pub mod config;
pub mod functional;
pub mod ingest;
pub mod metrics;
pub mod preprocess;
pub mod represent;
pub mod scalar;
pub mod synth;
pub mod tables;
pub mod task;
pub mod time;

pub use scalar::Scalar;
