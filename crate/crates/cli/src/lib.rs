//! Command-line pipeline around `bitbudget-core`: artifact containers,
//! manifests, reports and the `build` / `learn` / `allocate` / `compare` /
//! `validate` subcommands.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
