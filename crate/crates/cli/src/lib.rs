//! Command implementations behind the `simplefold` binary.

pub mod commands;
pub mod config;
pub mod error;
