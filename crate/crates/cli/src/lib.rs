//! Experiment harness for the latreg registration engine.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use error::CliError;
