//! Command-line front end: batch experiment drivers and the live sandbox
//! server.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod serve;
pub mod wire;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
