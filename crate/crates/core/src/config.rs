//! One versioned run configuration. Unknown keys are rejected everywhere,
//! and the hash of the canonical form goes into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{FeatureParams, LabelParams, StationTable};
use crate::domain::LocalCalendar;
use crate::evaluation::{CvParams, ModelGrid};
use crate::interpret::InterpretParams;
use crate::notifier::{NotifierConfig, Pipeline};
use crate::store::{PrivacyConfig, RegionTable};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "ODORWATCH_";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config version {0} is not supported (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("bad value for {key}: {value:?}")]
    Env { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-task forest sizes; everything else uses the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classification_trees: usize,
    pub regression_trees: usize,
    /// Grid searched on the first `selection_folds` test folds before
    /// evaluation. None evaluates the library defaults.
    pub grid: Option<ModelGrid>,
    pub selection_folds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classification_trees: 1000,
            regression_trees: 200,
            grid: None,
            selection_folds: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub listen: String,
    /// Sensor feed: a CSV path or an http(s) URL. Empty disables pulling.
    pub sensor_source: String,
    pub max_text_chars: usize,
    /// Where agency copies of reports are spooled.
    pub agency_spool: Option<PathBuf>,
    pub agency_url: Option<String>,
    pub webhook_url: Option<String>,
    pub tick_seconds: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            sensor_source: String::new(),
            max_text_chars: 1024,
            agency_spool: None,
            agency_url: None,
            webhook_url: None,
            tick_seconds: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub data_dir: PathBuf,
    pub timezone: String,
    pub seed: u64,
    pub stations: StationTable,
    pub regions: RegionTable,
    pub privacy: PrivacyConfig,
    pub features: FeatureParams,
    pub labels: LabelParams,
    pub model: ModelConfig,
    pub cv: CvParams,
    pub interpret: InterpretParams,
    pub notifier: NotifierConfig,
    pub server: ServerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data_dir: PathBuf::from("data"),
            timezone: "America/New_York".into(),
            seed: 0,
            stations: crate::synthetic::station_table(),
            regions: RegionTable::default(),
            privacy: PrivacyConfig::default(),
            features: FeatureParams::default(),
            labels: LabelParams::default(),
            model: ModelConfig::default(),
            cv: CvParams::default(),
            interpret: InterpretParams::default(),
            notifier: NotifierConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version));
        }
        self.calendar()?;
        self.notifier
            .retrain
            .parse::<crate::notifier::Schedule>()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.labels.horizon_hours < 1 {
            return Err(ConfigError::Invalid("labels.horizon_hours must be >= 1".into()));
        }
        if self.stations.0.is_empty() {
            return Err(ConfigError::Invalid("no stations configured".into()));
        }
        Ok(())
    }

    /// Overrides from `ODORWATCH_*` variables. Only the scalar keys that
    /// also exist as CLI flags are recognised.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref();
            let bad = || ConfigError::Env {
                key: k.as_ref().to_string(),
                value: v.to_string(),
            };
            match key {
                "DATA_DIR" => self.data_dir = PathBuf::from(v),
                "TIMEZONE" => self.timezone = v.to_string(),
                "SEED" => self.set_seed(v.parse().map_err(|_| bad())?),
                "LISTEN" => self.server.listen = v.to_string(),
                "SENSOR_SOURCE" => self.server.sensor_source = v.to_string(),
                _ => log::warn!("ignoring unknown variable {}", k.as_ref()),
            }
        }
        self.validate()
    }

    /// One seed for every RNG stream: CV, interpretation and retraining.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.cv.seed = seed;
        self.interpret.seed = seed;
        self.notifier.seed = seed;
    }

    pub fn calendar(&self) -> Result<LocalCalendar, ConfigError> {
        LocalCalendar::from_name(&self.timezone).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn pipeline(&self) -> Result<Pipeline, ConfigError> {
        Ok(Pipeline {
            stations: self.stations.clone(),
            calendar: self.calendar()?,
            features: self.features,
            labels: self.labels.clone(),
        })
    }
}

/// Stamped into every artifact file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
        }
    }
}
