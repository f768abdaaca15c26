//! Experiment harness for the off-policy evaluation toolkit: configuration,
//! seeded experiment drivers, and CSV persistence. The `opeval` binary is a
//! thin dispatcher over this library.

pub mod config;
pub mod metrics;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] opeval_core::Error),

    #[error("{0}")]
    Internal(String),
}
