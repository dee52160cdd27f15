//! Scenario runner for the spectrum-sharing radar simulator: configuration,
//! experiment commands, checkpoints and manifests.

pub mod agents;
pub mod config;
pub mod gradcheck;
pub mod manifest;
pub mod run;

pub use config::{Overrides, ScenarioConfig};
