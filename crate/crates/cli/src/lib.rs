//! Configuration, subcommands and self-checks behind the `mtopt` binary.

pub mod commands;
pub mod config;
pub mod verify;
