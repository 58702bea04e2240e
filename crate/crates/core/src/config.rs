//! Run configuration: one value fully determines one experiment.
//!
//! Configs load from TOML files; dotted-path command-line overrides are
//! applied onto the parsed document before deserialization. A serialized
//! copy is stored next to every run's results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{MultiLabelSpec, SegmentationSpec, TaskKind};
use crate::losses::KlSign;
use crate::reweight::DecayGranularity;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Training method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CelBaseline,
    FocalBaseline,
    SvaeReweight,
}

impl Method {
    pub fn uses_branch(&self) -> bool {
        matches!(self, Method::SvaeReweight)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::CelBaseline => write!(f, "cel-baseline"),
            Method::FocalBaseline => write!(f, "focal-baseline"),
            Method::SvaeReweight => write!(f, "svae-reweight"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cel" | "cel-baseline" => Ok(Method::CelBaseline),
            "focal" | "focal-baseline" => Ok(Method::FocalBaseline),
            "svae" | "svae-reweight" => Ok(Method::SvaeReweight),
            other => Err(ConfigError::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel" => Ok(TaskKind::Multilabel),
            "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(ConfigError::Invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub multilabel: MultiLabelSpec,
    pub segmentation: SegmentationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64],
            feature_dim: 64,
            latent_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Decision threshold for multi-label evaluation.
    pub eval_threshold: f64,
    /// Focusing exponent for the focal baseline.
    pub focal_gamma: f64,
    /// Record per-batch weight audit rows.
    pub audit_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            eval_threshold: 0.5,
            focal_gamma: 2.0,
            audit_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReweightConfig {
    /// Terminal alpha value; the exponential law reaches it at the final
    /// epoch.
    pub alpha_floor: f64,
    pub decay: DecayGranularity,
    /// Pins alpha to a fixed value for every step (sensitivity and
    /// equivalence checks).
    pub alpha_override: Option<f64>,
    pub kl_sign: KlSign,
    pub mse_weight: f64,
    pub task_weight: f64,
    pub kl_weight: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            alpha_floor: 0.01,
            decay: DecayGranularity::PerEpoch,
            alpha_override: None,
            kl_sign: KlSign::Standard,
            mse_weight: 1.0,
            task_weight: 1.0,
            kl_weight: 1.0,
        }
    }
}

/// Everything one run needs. Defaults give the desk-scale protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub method: Method,
    pub noise_ratio: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reweight: ReweightConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Multilabel,
            method: Method::SvaeReweight,
            noise_ratio: 0.0,
            seed: 1,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reweight: ReweightConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.6).contains(&self.noise_ratio) {
            return Err(ConfigError::Invalid(format!(
                "noise_ratio {} outside [0, 0.6]",
                self.noise_ratio
            )));
        }
        if self.task == TaskKind::Segmentation && self.method == Method::FocalBaseline {
            return Err(ConfigError::Invalid(
                "the focal baseline is defined for the multilabel task only".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(self.reweight.alpha_floor > 0.0 && self.reweight.alpha_floor <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "alpha_floor {} outside (0, 1]",
                self.reweight.alpha_floor
            )));
        }
        if let Some(a) = self.reweight.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return Err(ConfigError::Invalid(format!(
                    "alpha_override {a} outside [0, 1]"
                )));
            }
        }
        if self.train.focal_gamma < 0.0 {
            return Err(ConfigError::Invalid("focal_gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Parses TOML text and applies `key.path=value` overrides before
    /// deserializing. Values parse as TOML when possible, else as bare
    /// strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            let value = parse_override_value(raw.trim());
            set_path(&mut table, path.trim(), value)
                .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
        }
        let text = toml::to_string(&table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // A bare word like `segmentation` is not valid TOML on its own;
    // fall back to treating it as a string.
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Option<()> {
    let mut parts = path.split('.').peekable();
    let mut current = table;
    loop {
        let key = parts.next()?;
        if parts.peek().is_none() {
            current.insert(key.to_string(), value);
            return Some(());
        }
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()?;
    }
}
