//! Configuration-driven front end for `radner-core`: `solve`, `verify`,
//! `oracle` and `simulate`.
//!
//! Exit codes: 0 success, 1 a diagnostic check failed, 2 configuration
//! error, 3 solver error, 4 solution/config mismatch, 5 oracle unsupported.

pub mod commands;
pub mod config;

pub use commands::{CliError, Outcome};
pub use config::{ConfigError, Model, RunConfig};
