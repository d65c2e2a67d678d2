//! Command-line surface for clapdesk. Every subcommand writes into a run directory
//! that also holds the configuration snapshot needed to repeat it.

pub mod commands;
pub mod pipeline;

pub use commands::{exit_code, run, Cli};
