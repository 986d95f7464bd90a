//! Configuration and run-directory pipeline behind the `aoept` binary.

pub mod config;
pub mod pipeline;

pub use config::{ConfigError, RunConfig};
pub use pipeline::{MissingArtifact, Run, Scenario, Variant};
