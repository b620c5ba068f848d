//! Chat-completions backend for the research loop: a blocking client with
//! retries, reply-shape validation with one reformat round, record/replay
//! keyed by request hash, and generator / implementer / scheduler plugins.

mod client;
mod config;
mod plugins;
pub mod prompts;
pub mod schema;

use thiserror::Error;

pub use client::{parse_reply, Gateway, Message, ReplayEntry, ReplayStore};
pub use config::{GatewayConfig, ReplayMode};
pub use plugins::{GatewayGenerator, GatewayImplementer, LlmScheduler};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("gateway unavailable after {attempts} attempts: {message}")]
    GatewayUnavailable { attempts: u32, message: String },
    #[error("malformed reply: {reason}")]
    MalformedReply { reason: String, raw: String },
    #[error("no recorded reply for request {0}")]
    ReplayMiss(String),
    #[error("replay store: {0}")]
    Io(String),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;
