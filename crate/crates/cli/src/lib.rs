//! Command-line front end: data generation, DO-EM and CD training,
//! evaluation and sampling.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::execute;
pub use config::RunConfig;
pub use error::{CliError, ErrorClass};
