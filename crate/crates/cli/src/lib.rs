//! Configuration, orchestration and artifact output for quench runs.

pub mod config;
pub mod error;
pub mod run;

pub use config::{Mode, Resolved, RunConfig, PRESETS};
pub use error::{CliError, Result};
pub use run::{emit_circuit, run, RunSummary, VERSION};
