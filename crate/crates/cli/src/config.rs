//! Run configuration: optional TOML file merged with command-line flags,
//! and the reproducibility header written next to every run's outputs.

use std::path::{Path, PathBuf};

use postmask_core::nn::TrainConfig;
use postmask_core::pipeline::PipelineConfig;
use postmask_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.pipeline.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Snapshot of everything that determines a run's outputs.
#[derive(Debug, Serialize)]
pub struct RunHeader<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub jobs: usize,
    pub manifest: Option<&'a Path>,
    pub config_file: Option<&'a Path>,
    pub pipeline: &'a PipelineConfig,
    pub parameters: &'a C,
}

/// Writes `run.json` into `out_dir`. No timestamps, so reruns stay identical.
pub fn write_header<C: Serialize>(out_dir: &Path, header: &RunHeader<'_, C>) -> Result<PathBuf> {
    let path = out_dir.join("run.json");
    let mut text = serde_json::to_string_pretty(header).expect("header serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("[train]\nmax_epochs = 3\n[pipeline]\nlevel_db = -30.0\n").unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.pipeline.level_db, Some(-30.0));
        assert_eq!(cfg.pipeline.mask.alpha, 2.0);

        let cfg: FileConfig = toml::from_str("[pipeline.mask]\nalpha = 3.0\n").unwrap();
        assert_eq!(cfg.pipeline.mask.alpha, 3.0);
        assert_eq!(cfg.pipeline.mask.gamma, 1e-9);
        assert_eq!(cfg.pipeline.mask.bound, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nlr = 1.0\n").is_err());
    }
}
