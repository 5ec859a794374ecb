//! The `stemforge` command line: dataset synthesis, training, sampling,
//! evaluation, gradient checks and the session server. Every command leaves a
//! [`RunManifest`] with content hashes of what it read and wrote.

pub mod cli;
pub mod commands;
pub mod error;
pub mod manifest;

pub use cli::{run, run_args, Cli, Command};
pub use error::{CliError, Result};
pub use manifest::{ManifestBuilder, RunManifest};
