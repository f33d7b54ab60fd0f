use canopyseg::dataset::{AugmentConfig, DEFAULT_RATIOS};
use canopyseg::eval::{default_grid, DetectionRule};
use canopyseg::model::{TrainConfig, UNetConfig};
use canopyseg::raster::FilterConfig;
use canopyseg::synth::SceneConfig;
use canopyseg::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Default locations used when a subcommand flag is omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Everything a run needs, read from one JSON file. Missing sections take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    /// Scenes written by `synth`.
    pub scenes: usize,
    pub filter: FilterConfig,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub augment: AugmentConfig,
    pub model: UNetConfig,
    /// Seed of the weight initialisation.
    pub model_seed: u64,
    pub train: TrainConfig,
    pub calibration_grid: Vec<f64>,
    pub detection: DetectionRule,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            scenes: 1,
            filter: FilterConfig::default(),
            split_seed: 0,
            split_ratios: DEFAULT_RATIOS,
            augment: AugmentConfig::default(),
            model: UNetConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            calibration_grid: default_grid(),
            detection: DetectionRule::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.model, UNetConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig {
            scenes: 4,
            model_seed: 9,
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
