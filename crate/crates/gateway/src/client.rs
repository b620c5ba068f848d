use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::prompts::Prompts;
use crate::{GatewayConfig, GatewayError, ReplayMode, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

/// Stored reply file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub request: Value,
    pub reply: String,
}

/// Directory of `<sha256 of request body>.json` files.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
}

impl ReplayStore {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self { dir: dir.as_ref().to_path_buf() }
    }

    pub fn key(body: &Value) -> String {
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, body: &Value) -> Result<Option<String>> {
        let path = self.path(&Self::key(body));
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        let entry: ReplayEntry =
            serde_json::from_str(&text).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Ok(Some(entry.reply))
    }

    pub fn put(&self, body: &Value, reply: &str) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| GatewayError::Io(format!("{}: {e}", self.dir.display())))?;
        let path = self.path(&Self::key(body));
        let entry = ReplayEntry {
            request: body.clone(),
            reply: reply.to_string(),
        };
        let text = serde_json::to_string_pretty(&entry).map_err(|e| GatewayError::Io(e.to_string()))?;
        fs::write(&path, text).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))
    }
}

/// Chat-completions client with retries, record/replay and a token counter.
#[derive(Debug)]
pub struct Gateway {
    cfg: GatewayConfig,
    agent: ureq::Agent,
    store: Option<ReplayStore>,
    prompts: Prompts,
    tokens: AtomicU64,
    requests: AtomicU64,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let store = cfg.replay_dir.as_ref().map(ReplayStore::new);
        let prompts = Prompts::load(&cfg)?;
        Ok(Self {
            cfg,
            agent,
            store,
            prompts,
            tokens: AtomicU64::new(0),
            requests: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &Prompts {
        &self.prompts
    }

    /// Tokens reported by the endpoint so far.
    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::Relaxed)
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn request_body(&self, messages: &[Message]) -> Value {
        json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        })
    }

    /// Reply text for one chat request.
    pub fn chat(&self, messages: &[Message]) -> Result<String> {
        let body = self.request_body(messages);
        if self.cfg.mode == ReplayMode::Replay {
            let store = self.store.as_ref().expect("validated config");
            return store.get(&body)?.ok_or_else(|| GatewayError::ReplayMiss(ReplayStore::key(&body)));
        }
        let reply = self.post_with_retries(&body)?;
        if self.cfg.mode == ReplayMode::Record {
            self.store.as_ref().expect("validated config").put(&body, &reply)?;
        }
        Ok(reply)
    }

    fn post_with_retries(&self, body: &Value) -> Result<String> {
        let attempts = self.cfg.retries + 1;
        let mut last = String::new();
        for k in 0..attempts {
            if k > 0 && self.cfg.backoff_secs > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(self.cfg.backoff_secs * k as f64));
            }
            match self.post(body) {
                Ok(reply) => return Ok(reply),
                Err(Transport::Retry(m)) => last = m,
                Err(Transport::Fatal(e)) => return Err(e),
            }
        }
        Err(GatewayError::GatewayUnavailable { attempts, message: last })
    }

    fn post(&self, body: &Value) -> std::result::Result<String, Transport> {
        let endpoint = self.cfg.endpoint.as_deref().expect("validated config");
        let mut req = self.agent.post(endpoint).header("Content-Type", "application/json");
        if let Ok(token) = std::env::var(&self.cfg.token_env) {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut resp = req.send_json(body).map_err(|e| Transport::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Transport::Retry(e.to_string()))?;
        if !status.is_success() {
            return Err(Transport::Retry(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| {
            Transport::Fatal(GatewayError::MalformedReply {
                reason: format!("response is not JSON: {e}"),
                raw: text.clone(),
            })
        })?;
        if let Some(n) = v.pointer("/usage/total_tokens").and_then(Value::as_u64) {
            self.tokens.fetch_add(n, Ordering::Relaxed);
        }
        match v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(c) => Ok(c.to_string()),
            None => Err(Transport::Fatal(GatewayError::MalformedReply {
                reason: "response has no choices[0].message.content".into(),
                raw: text,
            })),
        }
    }

    /// Sends `messages` and parses the reply with `check`. A reply that fails
    /// the check gets one reformat request; a second failure is a
    /// [`GatewayError::MalformedReply`].
    pub fn structured<T>(
        &self,
        mut messages: Vec<Message>,
        check: impl Fn(&Value) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let first = self.chat(&messages)?;
        let err = match parse_reply(&first).and_then(|v| check(&v)) {
            Ok(t) => return Ok(t),
            Err(e) => e,
        };
        messages.push(Message::assistant(first));
        messages.push(Message::user(self.prompts.render("reformat", &[("error", err)])));
        let second = self.chat(&messages)?;
        parse_reply(&second)
            .and_then(|v| check(&v))
            .map_err(|reason| GatewayError::MalformedReply { reason, raw: second })
    }
}

enum Transport {
    Retry(String),
    Fatal(GatewayError),
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((k, _)) => &s[..k],
        None => s,
    }
}

/// JSON object in a reply, tolerating code fences and surrounding prose.
pub fn parse_reply(text: &str) -> std::result::Result<Value, String> {
    let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) else {
        return Err("reply holds no JSON object".into());
    };
    if b < a {
        return Err("reply holds no JSON object".into());
    }
    serde_json::from_str(&text[a..=b]).map_err(|e| format!("invalid JSON: {e}"))
}
