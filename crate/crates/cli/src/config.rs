//! `key = value` run configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hindsight_core::encoding::{EncoderConfig, EncoderVariant};
use hindsight_core::graph::{GraphConfig, ModelConfig};
use hindsight_core::optim::AdamConfig;
use hindsight_core::patches::{GridConfig, GridMode};
use hindsight_core::pretext::TrainConfig;

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "mode",
    "k",
    "D",
    "H",
    "d_model",
    "N",
    "heads",
    "d_ff",
    "agg_period",
    "extractors",
    "encoder",
    "lambda",
    "decoder_layers",
    "beta",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "batch_size",
    "seed",
    "fraction",
    "checkpoint_every",
];

/// Keys every model-building subcommand needs.
pub const MODEL_KEYS: &[&str] = &["k", "H", "d_model"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line, when the problem is tied to one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    /// Value and source line of each key.
    entries: BTreeMap<String, (String, usize)>,
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(Some(line), format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(Some(line), format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(err(Some(line), format!("`{key}` has no value")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line)) {
                return Err(err(Some(line), format!("`{key}` already set on line {first}")));
            }
        }
        Ok(Self { entries })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(None, format!("{}: {e}", path.display())))?;
        text.parse()
            .map_err(|e: ConfigError| err(e.line, format!("{}: {}", path.display(), e.message)))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require(&self, keys: &[&str]) -> Result<(), ConfigError> {
        let missing: Vec<&str> = keys.iter().copied().filter(|k| !self.contains(k)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(err(None, format!("missing required key(s): {}", missing.join(", "))))
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.entries
            .get(key)
            .map(|(v, line)| {
                v.parse()
                    .map_err(|e| err(Some(*line), format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| err(None, format!("missing required key `{key}`")))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get_or("seed", 0)
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        self.require(MODEL_KEYS)?;
        let mode: GridMode = self.get_or("mode", GridMode::Static)?;
        if mode == GridMode::Dynamic {
            self.require(&["D"])?;
        }
        let k: usize = self.need("k")?;
        let d_model: usize = self.need("d_model")?;
        let variant = self.get_or("encoder", EncoderVariant::TrainablePeriodic)?;
        let default_lambda = if variant == EncoderVariant::Periodic { 10.0 } else { 1.0 };
        let config = ModelConfig {
            grid: GridConfig {
                mode,
                levels: k,
                divisions: self.get_or("D", 0)?,
                rescale: self.need("H")?,
            },
            extractors: self.get_or("extractors", k)?,
            d_model,
            encoding: EncoderConfig {
                variant,
                d_model,
                lambda: self.get_or("lambda", default_lambda)?,
            },
            graph: GraphConfig {
                layers: self.get_or("N", 4)?,
                heads: self.get_or("heads", 4)?,
                d_ff: self.get_or("d_ff", 2 * d_model)?,
                agg_period: self.get_or("agg_period", 2)?,
            },
            decoder_layers: self.get_or("decoder_layers", 2)?,
        };
        config.validate().map_err(|e| err(None, e.to_string()))?;
        Ok(config)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        self.require(&["steps"])?;
        let d = TrainConfig::default();
        let o = d.optimizer;
        let config = TrainConfig {
            optimizer: AdamConfig {
                lr: self.get_or("lr", o.lr)?,
                beta1: self.get_or("beta1", o.beta1)?,
                beta2: self.get_or("beta2", o.beta2)?,
                eps: self.get_or("eps", o.eps)?,
            },
            beta: self.get_or("beta", d.beta)?,
            steps: self.need("steps")?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            seed: self.seed()?,
            mask_fraction: self.get_or("fraction", d.mask_fraction)?,
            checkpoint_every: self.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        config.validate().map_err(|e| err(None, e.to_string()))?;
        Ok(config)
    }
}
