//! Configuration, plugin selection, pipelines and the command line.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod plugins;

pub use config::{load_config, save_config, DataConfig, ExperimentConfig};
pub use pipeline::{evaluate_dirs, synth, Experiment, RunRecord, Stream};
pub use plugins::{PluginConfig, PluginSet, PLUGIN_PATH_ENV};
