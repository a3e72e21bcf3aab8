use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::reconstruction::InferenceConfig;
use crate::stream_high::HighConfig;
use crate::stream_low::LowConfig;
use crate::stream_mid::MidConfig;

use super::plugins::PluginConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest directory. When absent the dataset is synthesised in memory
    /// from `synth` and the experiment seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub high: HighConfig,
    pub mid: MidConfig,
    pub low: LowConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricConfig,
    pub plugins: PluginConfig,
    /// Relative paths resolve against this directory, normally the config
    /// file's. Kept out of the serialised form so the digest depends only on
    /// what the file says.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            high: HighConfig::default(),
            mid: MidConfig::default(),
            low: LowConfig::default(),
            inference: InferenceConfig::default(),
            metrics: MetricConfig::default(),
            plugins: PluginConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.high.validate()?;
        self.mid.validate()?;
        self.low.validate()?;
        self.inference.validate()?;
        self.metrics.validate()?;
        self.plugins.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The effective configuration with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form. Object keys serialise sorted, so
    /// the digest ignores the field order of the source file.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn output_path(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.data.manifest.as_ref().map(|m| self.base_dir.join(m))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_path().join("checkpoints")
    }
}

/// Loads and validates a TOML experiment config. Relative paths inside it
/// are resolved against the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    config.base_dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    Ok(config)
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    crate::checkpoint::write_atomic(path, config.to_toml()?.as_bytes())
}
