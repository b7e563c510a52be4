//! Experiment pipeline behind the `advseg` command-line tool.

pub mod compare;
pub mod config;
pub mod error;
pub mod grid;
pub mod stages;

pub use config::{ExperimentConfig, Stage};
pub use error::{HarnessError, Result};
pub use stages::{run, RunOptions, StageOutput};
