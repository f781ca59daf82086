//! Command-line surface for the face recovery toolkit: dataset synthesis,
//! resumable training, recovery of individual portraits, evaluation reports
//! and the gradient check suite.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod store;

pub use error::{CliError, Result};
