//! Versioned TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use ratectl::agent::{NetConfig, TrainConfig};
use ratectl::reward::RewardMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    SelfCompete,
    Augmented,
    Lagrangian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub mode: RewardKind,
    /// Multiplier of the overshoot penalty; only read in Lagrangian mode.
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mode: RewardKind::SelfCompete,
            lambda: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn mode(&self) -> Result<RewardMode> {
        let mode = match self.mode {
            RewardKind::SelfCompete => RewardMode::SelfCompete,
            RewardKind::Augmented => RewardMode::Augmented,
            RewardKind::Lagrangian => RewardMode::lagrangian(self.lambda),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Corpus directory; relative paths resolve against the config file.
    pub corpus: PathBuf,
    /// Output directory; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|source| CliError::Toml {
            path: origin.to_path_buf(),
            source,
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                origin.display(),
                cfg.version
            )));
        }
        let base = origin.parent().unwrap_or(Path::new("."));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.out = cfg.out.map(|o| base.join(o));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text, path)
    }

    /// Checks every section and ties the value head's range to the reward.
    pub fn finalize(&mut self) -> Result<RewardMode> {
        let mode = self.reward.mode()?;
        self.net.bounded_value = mode.bounded();
        self.net.validate()?;
        self.train.validate()?;
        Ok(mode)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("version = 1\ncorpus = \"c\"\n", Path::new("/runs/a.toml")).unwrap();
        assert_eq!(cfg.corpus, PathBuf::from("/runs/c"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.reward.mode, RewardKind::SelfCompete);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("version = 1\ncorpus = \"c\"\n[train]\nstepz = 4\n", Path::new("a.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::parse("version = 1\ncorpus = \"c\"\nextra = 1\n", Path::new("a.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn version_is_checked() {
        let err = RunConfig::parse("version = 2\ncorpus = \"c\"\n", Path::new("a.toml")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn lagrangian_unbounds_the_value_head() {
        let text = "version = 1\ncorpus = \"c\"\n[reward]\nmode = \"lagrangian\"\nlambda = 2.0\n";
        let mut cfg = RunConfig::parse(text, Path::new("a.toml")).unwrap();
        let mode = cfg.finalize().unwrap();
        assert!(!mode.bounded());
        assert!(!cfg.net.bounded_value);
        let round = RunConfig::parse(&cfg.to_toml().unwrap(), Path::new("a.toml")).unwrap();
        assert_eq!(round.reward, cfg.reward);
    }

    #[test]
    fn negative_lambda_is_a_config_error() {
        let text = "version = 1\ncorpus = \"c\"\n[reward]\nmode = \"lagrangian\"\nlambda = -1.0\n";
        let mut cfg = RunConfig::parse(text, Path::new("a.toml")).unwrap();
        assert_eq!(cfg.finalize().unwrap_err().exit_code(), 2);
    }
}
