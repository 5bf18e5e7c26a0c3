//! Orchestration for the `pixelfool` binary: configuration and subcommands.

pub mod commands;
pub mod config;

pub use config::RunConfig;
