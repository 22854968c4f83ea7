//! Command-line front end for pilotflow: run configurations, built-in
//! programs, benchmarks and monitor-log reports.

pub mod bench;
pub mod config;
pub mod programs;
pub mod report;
pub mod runtime;

pub use config::{ConfigError, RunConfig};
pub use runtime::{RunError, RunOptions, Runtime};
