//! Run configuration: one TOML file holding every section, with dotted-key
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::postprocess::PostConfig;
use crate::training::TrainConfig;
use crate::variants::VariantRegistry;

/// File the effective configuration is echoed to in every output directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Feature cache; the environment variable is used when unset.
    pub cache_dir: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Registered variant applied on top of `model` (see [`VariantRegistry`]).
    pub variant: String,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub post: PostConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "full".into(),
            dsp: DspConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            post: PostConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`section.key=value`) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            config.paths.resolve_against(base);
        }
        Ok(config)
    }

    /// Defaults plus `overrides`, for runs without a file.
    pub fn from_overrides(overrides: &[String]) -> Result<RunConfig> {
        Self::from_toml("", overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.post.validate()?;
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels ({}) must equal dsp.n_mels ({})",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        VariantRegistry::standard().get(&self.variant)?;
        Ok(())
    }

    /// Model configuration with the selected variant applied.
    pub fn effective_model(&self) -> Result<ModelConfig> {
        VariantRegistry::standard().configure(&self.variant, &self.model)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the configuration next to a run's outputs.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.split,
            &mut self.out_dir,
            &mut self.cache_dir,
            &mut self.resume,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Sets `a.b.c = value`, reading the value as a TOML literal and falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nchanels = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "[model]\nchannels = 4\n";
        let c = RunConfig::from_toml(
            text,
            &[
                "model.channels=6".into(),
                "model.toggles.use_pe=false".into(),
                "variant=no_lstm".into(),
                "paths.out_dir=runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.channels, 6);
        assert!(!c.model.toggles.use_pe);
        assert_eq!(c.paths.out_dir, Some(PathBuf::from("runs/a")));
        let m = c.effective_model().unwrap();
        assert!(!m.toggles.use_lstm && !m.toggles.use_pe);
    }

    #[test]
    fn invariants_revalidated() {
        assert!(RunConfig::from_overrides(&["model.n_mels=64".into()]).is_err());
        assert!(RunConfig::from_overrides(&["variant=no_cnn".into()]).is_err());
        assert!(RunConfig::from_overrides(&["train.learning_rate=-1".into()]).is_err());
        assert!(RunConfig::from_overrides(&["model.channels".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_overrides(&["train.clip_norm=5.0".into(), "dsp.log_compress=true".into()]).unwrap();
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
