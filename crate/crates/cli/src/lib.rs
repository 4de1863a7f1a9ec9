//! Command-line orchestration for qeforge: experiment configuration,
//! training and scoring subcommands, and the preset grid.

pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod results;

pub use commands::{run, Cli, Command};
pub use config::ExperimentConfig;
pub use experiment::{preset_config, recipe, PresetRun, Recipe, Session, PRESETS};
