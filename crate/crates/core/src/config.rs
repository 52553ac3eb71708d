//! Experiment configuration: a TOML file with `[synth]`, `[train]` and
//! `[ablation]` tables, plus `key=value` overrides on dotted paths.
//!
//! Precedence, lowest first: built-in defaults, the file, `OTL_SEED`
//! (sets both `train.seed` and `synth.seed`), then `--set` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "OTL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Granularities of the full multi-group variant. The single-group
    /// variants use only the first entry.
    pub k_list: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            k_list: vec![20, 10, 40],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.ablation.k_list.is_empty() || self.ablation.k_list.contains(&0) {
            return Err(Error::InvalidConfig(
                "ablation.k_list must hold positive entries".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(text, None, &[])
    }

    /// Parses `text`, applies the seed override and `key=value` overrides,
    /// then validates.
    pub fn resolve(text: &str, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={seed} is not an integer")))?;
            let seed = Value::Integer(i64::try_from(seed).map_err(|_| Error::InvalidConfig("seed too large".into()))?);
            set_path(&mut root, "train.seed", seed.clone())?;
            set_path(&mut root, "synth.seed", seed)?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Config = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or defaults when `path` is `None`) and applies
    /// `OTL_SEED` from the environment plus `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(&text, env.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::InvalidConfig(format!("empty key '{key}'")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("'{p}' in '{key}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterMode;
    use crate::encoder::OptimizerKind;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn file_values_are_read() {
        let cfg = Config::from_toml(
            "[train]\nlr = 0.01\noptimizer = \"sgd\"\n[train.groups]\nmode = \"dbscan\"\ndbscan_eps_list = [0.3]\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.train.groups.mode, ClusterMode::Dbscan);
    }

    #[test]
    fn overrides_beat_file_and_env() {
        let cfg = Config::resolve(
            "[train]\nseed = 1\ntau = 0.1\n",
            Some("7"),
            &[
                "train.tau=0.2".into(),
                "train.weights.wcl=0".into(),
                "ablation.k_list=[3,6]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.train.tau, 0.2);
        assert_eq!(cfg.train.weights.wcl, 0.0);
        assert_eq!(cfg.ablation.k_list, vec![3, 6]);
    }

    #[test]
    fn integer_override_for_float_field() {
        let cfg = Config::resolve("", None, &["train.sinkhorn.lambda=5".into()]).unwrap();
        assert_eq!(cfg.train.sinkhorn.lambda, 5.0);
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        assert!(matches!(
            Config::from_toml("[nope]\na = 1\n"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn bad_override_rejected() {
        assert!(Config::resolve("", None, &["train.lr".into()]).is_err());
        assert!(Config::resolve("", None, &["train.lr=fast".into()]).is_err());
        assert!(Config::resolve("", Some("x"), &[]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            Config::resolve("", None, &["train.tau=0".into()]),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn serialized_defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
