//! Library side of the `eco` command-line tool.

pub mod commands;
pub mod config;
