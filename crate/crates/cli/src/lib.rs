//! Library side of the `flowcache-sim` binary: configuration resolution,
//! the `run`, `verify` and `sweep` commands, and shared comparisons.

pub mod compare;
pub mod config;
pub mod error;
pub mod run;
pub mod sweep;
pub mod verify;

pub use error::{CliError, Result};
