//! Command-line pipeline around the `thermoforge` library.

pub mod commands;
pub mod config;
pub mod errors;
pub mod serve;
