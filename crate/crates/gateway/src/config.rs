use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{GatewayError, Result};

/// Where replies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Call the endpoint; nothing is stored.
    #[default]
    Live,
    /// Call the endpoint and store each reply under its request hash.
    Record,
    /// Serve stored replies only; never touches the network.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Chat-completions URL.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token. Unset variable means no auth header.
    pub token_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    /// Extra attempts after a transport failure.
    pub retries: u32,
    /// Pause before retry `k` is `k * backoff_secs`.
    pub backoff_secs: f64,
    pub mode: ReplayMode,
    pub replay_dir: Option<PathBuf>,
    /// Directory overriding the bundled prompt templates, file by file.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-4o-mini".into(),
            token_env: "ALPHALOOP_API_TOKEN".into(),
            temperature: 0.8,
            max_tokens: 4096,
            timeout_secs: 120.0,
            retries: 2,
            backoff_secs: 1.0,
            mode: ReplayMode::Live,
            replay_dir: None,
            prompt_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GatewayError::Config(m.into()));
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return bad("timeout_secs must be > 0");
        }
        if self.backoff_secs.is_nan() || self.backoff_secs < 0.0 {
            return bad("backoff_secs must be >= 0");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be > 0");
        }
        if self.mode != ReplayMode::Replay && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return bad("no endpoint configured");
        }
        if self.mode != ReplayMode::Live && self.replay_dir.is_none() {
            return bad("record and replay modes need replay_dir");
        }
        Ok(())
    }
}
