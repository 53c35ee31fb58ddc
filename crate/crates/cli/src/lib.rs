//! Experiment runner for the deep backward dynamic programming scheme: configuration,
//! presets and the `train`, `validate`, `sweep-h`, `capacity` and `dump-paths` entry points.

pub mod config;
pub mod run;

pub use config::{config_from_json, load_config, preset, ExperimentConfig};

/// Environment variable overriding the output directory of the config file
/// (`--out` still takes precedence).
pub const OUT_DIR_ENV: &str = "DBDP_OUT_DIR";
