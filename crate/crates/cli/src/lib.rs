//! Operator command line for the pullgrid production services, and the
//! agent daemon.

pub mod args;
pub mod commands;
pub mod daemon;
pub mod render;

pub use commands::CliError;
