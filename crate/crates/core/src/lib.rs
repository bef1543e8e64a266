//! Dataset-level training-data contamination auditing.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod provider;
pub mod report;
pub mod scoring;
pub mod toylm;

pub use error::{Error, Result};
