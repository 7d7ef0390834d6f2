//! Command-line front end and HTTP service.

pub mod commands;
pub mod config;
pub mod error;
pub mod service;

pub use commands::{run, Cli};
pub use error::CliError;
