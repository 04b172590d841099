//! Run configuration, artifact layout and subcommands of the `cola` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
