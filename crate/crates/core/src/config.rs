//! Run configuration file.
//!
//! A TOML file with `[model]`, `[train]`, `[data]` and `[data.synth]`
//! tables; every key is optional. The seed comes from, in increasing
//! precedence: the built-in default, `LESIONCASCADE_SEED`, the file, and
//! command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, DEFAULT_MAX_EXTENT};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "LESIONCASCADE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Longest image side after resizing.
    pub max_extent: usize,
    /// Size of the held-out synthetic split written by `synth`.
    pub test_count_per_class: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_extent: DEFAULT_MAX_EXTENT,
            test_count_per_class: 25,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn has_key(table: &toml::Table, section: &[&str], key: &str) -> bool {
    let mut t = table;
    for s in section {
        match t.get(*s).and_then(|v| v.as_table()) {
            Some(next) => t = next,
            None => return false,
        }
    }
    t.contains_key(key)
}

impl RunConfig {
    /// Parses `text`; `env_seed` fills any seed the text leaves unset.
    pub fn from_toml(text: &str, env_seed: Option<u64>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut config: RunConfig = table.clone().try_into().map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(seed) = env_seed {
            if !has_key(&table, &["train"], "seed") {
                config.train.seed = seed;
            }
            if !has_key(&table, &["data", "synth"], "seed") {
                config.data.synth.seed = seed;
            }
        }
        Ok(config)
    }

    /// Reads the file at `path` (or starts from defaults) and applies the
    /// seed from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, env_seed).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.max_extent < 32 {
            return Err(Error::Config("max_extent must be at least 32".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
