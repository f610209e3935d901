//! File formats, configuration and the run driver around `fscil-core`.

pub mod checkpoint;
pub mod config;
pub mod csvio;
mod error;
pub mod parallel;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
