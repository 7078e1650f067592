//! Command line front end and experiment pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod store;

pub use commands::{run, Cli};
pub use config::{PipelineConfig, TauChoice};
pub use error::{CliError, CliResult, ErrorKind};
pub use pipeline::run_pipeline;
