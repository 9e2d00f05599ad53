//! Run configuration: one TOML document with a table per module, plus
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enhancer::{CycleGanConfig, GanSchedule};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::heatmap::HeatmapConfig;
use crate::localizer::LocalizerConfig;
use crate::losses::LossConfig;
use crate::synthdata::SceneConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces every per-module seed.
    pub seed: Option<u64>,
    /// `cpu`, `cuda` or `cuda:N`; falls back to `PIPETTELOC_DEVICE`.
    pub device: Option<String>,
    pub scene: SceneConfig,
    pub heatmap: HeatmapConfig,
    pub loss: LossConfig,
    pub localizer: LocalizerConfig,
    pub train: TrainConfig,
    pub gan: CycleGanConfig,
    pub gan_schedule: GanSchedule,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Desk-scale preset: 64×64 scenes, the small localizer and a 5/5/10 schedule.
    pub fn small() -> Self {
        Self {
            scene: SceneConfig::small(),
            localizer: LocalizerConfig::small(),
            train: TrainConfig {
                batch_size: SMALL_BATCH_SIZE,
                ..TrainConfig::with_epochs(5, 5, 10)
            },
            heatmap: HeatmapConfig {
                sigma: SMALL_SIGMA,
                ..HeatmapConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { String::new() } else { key }, e.inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Sets `key.path` to `value` (parsed as a TOML value, else taken as a string)
    /// and revalidates.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(key, e.to_string()))?;
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let text = toml::to_string(&doc).map_err(|e| Error::config(key, e.to_string()))?;
        *self = Self::from_toml_str(&text)?;
        Ok(())
    }

    /// Configuration with the top-level seed pushed into every module.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.scene.rng_seed = s;
            c.localizer.seed = s;
            c.train.seed = s;
            c.gan.seed = s;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.heatmap.validate()?;
        self.loss.validate()?;
        self.localizer.validate()?;
        self.train.validate()?;
        self.gan.validate()?;
        self.eval.validate()?;
        if self.scene.image_size != self.localizer.image_size {
            return Err(Error::config(
                "localizer.image_size",
                format!("{} differs from scene.image_size {}", self.localizer.image_size, self.scene.image_size),
            ));
        }
        Ok(())
    }
}

/// Heatmap spread for 64×64 scenes: σ = 10 scaled by 64/256.
pub const SMALL_SIGMA: f64 = 2.5;

/// Batch size of the desk-scale preset.
pub const SMALL_BATCH_SIZE: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::small()] {
            let text = cfg.to_toml_string().unwrap();
            let back = RunConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml_string().unwrap(), text);
        }
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let err = RunConfig::from_toml_str("[train]\nbatch_sise = 4\n").unwrap_err();
        match err {
            Error::InvalidConfig { key, .. } => assert!(key.starts_with("train"), "{key}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_values_report_key_path() {
        let err = RunConfig::from_toml_str("[scene]\nimage_size = 100\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref key, .. } if key == "scene.image_size"), "{err}");
        let err = RunConfig::from_toml_str("[loss]\nalpha = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref key, .. } if key == "loss.alpha"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::small();
        c.apply_override("train.batch_size", "8").unwrap();
        c.apply_override("paths.data", "some/dir").unwrap();
        c.apply_override("seed", "5").unwrap();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.paths.data, Some(PathBuf::from("some/dir")));
        assert_eq!(c.effective().localizer.seed, 5);
        assert!(c.apply_override("heatmap.sigma", "-1").is_err());
        assert_eq!(c.heatmap.sigma, SMALL_SIGMA);
    }
}
