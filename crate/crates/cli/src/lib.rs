//! Pipeline driver: run configuration and one function per subcommand.

pub mod commands;
pub mod config;

pub use config::RunConfig;
