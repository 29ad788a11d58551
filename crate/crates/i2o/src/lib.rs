//! Experiment harness for `i2o-core`: configuration, deterministic command
//! execution, CSV export, text fixtures and SVG charts.

pub mod config;
pub mod csvio;
pub mod error;
pub mod fixture;
pub mod plot;
pub mod run;

pub use config::{Command, Overrides, Plan, RawConfig};
pub use error::{CliError, Result};
pub use run::{run, Outcome};
