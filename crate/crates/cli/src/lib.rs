//! Command-line front end: JSON run configs and the artifact writer.

pub mod commands;
pub mod config;

pub use commands::{execute, is_config_error, Command};
pub use config::RunConfig;
