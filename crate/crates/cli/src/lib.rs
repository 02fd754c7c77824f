//! Command-line front end: cohort ingestion, the `fit`, `simulate`,
//! `calibrate` and `report` subcommands, and their file formats.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{execute, CommandResult, Output};
pub use config::{Cli, Command, Flags};
pub use error::{CliError, Result};
