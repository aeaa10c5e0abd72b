use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerateRequest, Message};
use crate::error::{BackendError, BackendErrorKind, Error, Result};

pub const ENV_URL: &str = "ADASEARCH_LLM_URL";
pub const ENV_KEY: &str = "ADASEARCH_LLM_KEY";
pub const ENV_MODEL: &str = "ADASEARCH_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpPolicyConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Per-request timeout.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

impl HttpPolicyConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            initial_backoff_ms: default_backoff_ms(),
        }
    }

    /// Reads `ADASEARCH_LLM_URL`, `ADASEARCH_LLM_MODEL` and, optionally,
    /// `ADASEARCH_LLM_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let url = var(ENV_URL).ok_or_else(|| Error::Config(format!("{ENV_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| Error::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = Self::new(url, model);
        cfg.api_key = var(ENV_KEY);
        Ok(cfg)
    }
}

/// OpenAI-compatible chat-completion client. Sample-only.
#[derive(Debug)]
pub struct HttpPolicy {
    cfg: HttpPolicyConfig,
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl HttpPolicy {
    pub fn new(cfg: HttpPolicyConfig) -> Result<Self> {
        if cfg.base_url.trim().is_empty() {
            return Err(Error::Config("HTTP policy base_url is empty".into()));
        }
        if cfg.timeout_ms == 0 {
            return Err(Error::Config("HTTP policy timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let endpoint = format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/'));
        Ok(Self { cfg, endpoint, client })
    }

    pub fn config(&self) -> &HttpPolicyConfig {
        &self.cfg
    }

    pub(super) fn generate(&self, req: &GenerateRequest<'_>) -> Result<super::Generation, BackendError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: req.messages,
            temperature: req.params.temperature,
            top_p: req.params.top_p,
            max_tokens: req.params.max_new_tokens,
            stop: &req.params.stop_sequences,
        };
        let mut backoff = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => {
                    let text = reappend_stop(&text, &req.params.stop_sequences);
                    return Ok(super::Generation::text(text));
                }
                Err(kind) if kind.is_retryable() && attempts <= self.cfg.max_retries => {
                    log::warn!(
                        "{}: {kind}; retrying in {} ms (attempt {attempts})",
                        self.endpoint,
                        backoff.as_millis()
                    );
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(kind) => {
                    return Err(BackendError {
                        endpoint: self.endpoint.clone(),
                        kind,
                        attempts,
                    })
                }
            }
        }
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<String, BackendErrorKind> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.cfg.api_key {
            request = request.bearer_auth(key);
        }
        let resp = request
            .send()
            .map_err(|e| BackendErrorKind::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendErrorKind::Status(status.as_u16()));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendErrorKind::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendErrorKind::Malformed("missing choices[0].message.content".into()))
    }
}

/// Servers strip the matched stop sequence. If the completion ends inside
/// an open tag whose closing form is a stop sequence, put it back.
pub fn reappend_stop(text: &str, stops: &[String]) -> String {
    let mut best: Option<(usize, &str)> = None;
    for stop in stops {
        let Some(name) = stop.strip_prefix("</").and_then(|s| s.strip_suffix('>')) else {
            continue;
        };
        let open = format!("<{name}>");
        let Some(open_at) = text.rfind(&open) else {
            continue;
        };
        let closed = text[open_at..].contains(stop.as_str());
        if !closed && best.is_none_or(|(at, _)| open_at > at) {
            best = Some((open_at, stop));
        }
    }
    match best {
        Some((_, stop)) => format!("{text}{stop}"),
        None => text.to_string(),
    }
}
