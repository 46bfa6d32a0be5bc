//! Configuration, output formats and subcommands of the `ivpb` binary.

pub mod commands;
pub mod config;
pub mod snapshot;
