//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use alphaloop::backtest::StrategyConfig;
use alphaloop::research::LoopConfig;
use alphaloop_gateway::GatewayConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    #[serde(flatten)]
    pub run: LoopConfig,
    pub bandit: BanditSettings,
    pub data: DataSettings,
    pub gateway: GatewayConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditSettings {
    /// Prior standard deviation of the arm coefficients.
    pub tau: f64,
    /// Reward noise standard deviation.
    pub sigma: f64,
}

impl Default for BanditSettings {
    fn default() -> Self {
        Self { tau: 1.0, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub panel: Option<PathBuf>,
    /// Used when no panel file is given.
    pub synthetic: Option<SyntheticSettings>,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            panel: None,
            synthetic: None,
            train_frac: 0.6,
            valid_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSettings {
    pub instruments: usize,
    pub dates: usize,
    pub seed: u64,
    pub signal: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            instruments: 100,
            dates: 500,
            seed: 0,
            signal: 0.5,
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => read_toml(p),
        None => Ok(FileConfig::default()),
    }
}

pub fn load_strategy(path: Option<&Path>) -> Result<StrategyConfig> {
    let cfg = match path {
        Some(p) => read_toml(p)?,
        None => StrategyConfig::default(),
    };
    cfg.validate().context("strategy config")?;
    Ok(cfg)
}
