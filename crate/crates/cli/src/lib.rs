//! Batch orchestration of the attack-signature pipeline: configuration and
//! presets, per-stage execution with a hashed run manifest, and report
//! emission.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, CliResult};
pub use pipeline::{Run, Stage};

use std::path::{Path, PathBuf};

/// Environment variable naming the data root: the base for relative corpus
/// paths and the default parent of run directories.
pub const DATA_ROOT_ENV: &str = "ADVSIG_DATA_ROOT";

/// Loads the configuration from `path`, or the preset when no path is
/// given, and returns it with the exact bytes it was read from.
pub fn resolve_config(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> CliResult<(ExperimentConfig, Vec<u8>)> {
    let (mut cfg, bytes) = match (path, preset) {
        (Some(_), Some(_)) => return Err(CliError::Config("--config and --preset are mutually exclusive".into())),
        (Some(p), None) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (ExperimentConfig::parse(&bytes)?, bytes)
        }
        (None, preset) => {
            let cfg = ExperimentConfig::preset(preset.unwrap_or(Preset::Smoke));
            let bytes = cfg.canonical_json();
            (cfg, bytes)
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, bytes))
}

/// `<data root>/runs/<preset>-seed<seed>`.
pub fn default_output(data_root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    data_root.join("runs").join(format!("{}-seed{}", cfg.preset.name(), cfg.seed))
}
