//! Failure triage for continuous integration.
//!
//! Classifies observed test failures as false alerts (flaky failures that
//! would pass on rerun) or legitimate failures, using run properties and
//! textual artifacts instead of reruns. The crate covers the whole offline
//! workflow: record ingestion and cleaning, per-test history metrics,
//! TF-IDF featurization, a from-scratch random forest with threshold
//! calibration, category-aware evaluation and a rerun cost comparison.

pub mod config;
pub mod corpus;
pub mod costmodel;
pub mod error;
pub mod evaluation;
pub mod featurizer;
pub mod forest;
pub mod history;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, ErrorKind, Result};

/// Version string stamped into every artifact this crate writes.
pub const TOOL_VERSION: &str = concat!("failtriage ", env!("CARGO_PKG_VERSION"));
