//! Scenario configuration and the cached experiment pipeline behind the
//! `tclvb` command-line tool.

pub mod config;
pub mod pipeline;

pub use config::{DispatchSettings, ScenarioConfig, SignalSource};
pub use pipeline::{run_pipeline, Pipeline, RunReport, Stage, StageError};
