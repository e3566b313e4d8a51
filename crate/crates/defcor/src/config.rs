//! Reproducible run configuration: one JSON document with `synth`, `net`,
//! `train`, `loss`, `eval` and `io` sections. Unknown keys are rejected;
//! every field has a default matching the values the pipeline was built
//! around, so an empty object `{}` is a valid config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::NetConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Emit per-sample flow-error color maps next to the report.
    pub write_error_maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            write_error_maps: default_true(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Worker fan-out for synth/eval; 0 uses all cores.
    pub jobs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub synth: SynthConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: default_version(),
            synth: SynthConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// NetConfig lives in net.rs without serde defaults of its own; keep its
// deserialization strict here via a blanket test instead of attributes.

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.config_version, CONFIG_VERSION);
        assert_eq!(cfg.synth.subjects * cfg.synth.forces_n.len(), 72);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.loss.lambda1, 1.0);
        assert_eq!(cfg.loss.lambda2, 10.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
        assert!(
            serde_json::from_str::<RunConfig>("{\"train\": {\"bogus\": 1}}").is_err()
        );
    }

    #[test]
    fn roundtrip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = RunConfig::default();
        cfg.train.steps = 42;
        cfg.synth.seed = 9;
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.train.steps, 42);
        assert_eq!(back.synth.seed, 9);
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, "{\"config_version\": 999}").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }
}
