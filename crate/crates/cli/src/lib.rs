//! Command-line front end and review service for the counting pipeline.

pub mod args;
pub mod commands;
pub mod data;
pub mod error;
pub mod run;
pub mod service;

pub use error::{CliError, Result};
