//! Policy backends.
//!
//! Every backend answers the same request: given the conversation so far,
//! the prompt mode and the rollout coordinates (question id, turn index,
//! seed), produce one completion. Three backends exist:
//!
//! * [`ScriptedPolicy`]: fixtures and per-question stochastic profiles, for
//!   tests and offline benchmarks.
//! * [`ToySoftmaxPolicy`]: a tabular softmax over a handful of action tokens
//!   per `(mode, question)` context. This is the only trainable backend.
//! * [`HttpPolicy`]: an OpenAI-compatible chat-completion endpoint,
//!   sample-only.

mod http;
mod scripted;
mod toy;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{reappend_stop, HttpPolicy, HttpPolicyConfig};
pub use scripted::{DecisionRule, FixtureKey, ScriptedFile, ScriptedPolicy, ScriptedProfile};
pub use toy::{context_for, is_retrieval, ContextKey, ThetaGrad, ThetaKey, ToyAction, ToySoftmaxPolicy, RETRIEVED_SUFFIX};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Param,
    Search,
    Decision,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Param, PromptMode::Search, PromptMode::Decision];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Param => "param",
            PromptMode::Search => "search",
            PromptMode::Decision => "decision",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param" => Ok(PromptMode::Param),
            "search" => Ok(PromptMode::Search),
            "decision" => Ok(PromptMode::Decision),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub fn default_stop_sequences() -> Vec<String> {
    ["</search>", "</answer>", "</assessment>"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// Sampling parameters. `temperature == 0` means greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self::rollout(0)
    }
}

impl GenParams {
    /// Training-time sampling: temperature 1, top-p 1.
    pub fn rollout(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 500,
            stop_sequences: default_stop_sequences(),
            seed,
        }
    }

    /// Evaluation-time decoding.
    pub fn greedy(seed: u64) -> Self {
        Self {
            temperature: 0.0,
            ..Self::rollout(seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Validation(format!("top_p must be in (0,1], got {}", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Validation("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// One generation call.
#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub messages: &'a [Message],
    pub mode: PromptMode,
    pub question_id: &'a str,
    pub turn: usize,
    pub params: &'a GenParams,
}

/// A completion plus, for the toy backend, the sampled action token and its
/// log-probability under the sampling policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub action_token: Option<String>,
    pub logprob: Option<f64>,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            action_token: None,
            logprob: None,
        }
    }
}

/// Opaque handle over the three backends. Cloning is cheap; the toy policy
/// is shared copy-on-write, so a clone taken before an update acts as a
/// frozen snapshot.
#[derive(Debug, Clone)]
pub enum PolicyHandle {
    Scripted(Arc<ScriptedPolicy>),
    Toy(Arc<ToySoftmaxPolicy>),
    Http(Arc<HttpPolicy>),
}

impl PolicyHandle {
    pub fn scripted(policy: ScriptedPolicy) -> Self {
        PolicyHandle::Scripted(Arc::new(policy))
    }

    pub fn toy(policy: ToySoftmaxPolicy) -> Self {
        PolicyHandle::Toy(Arc::new(policy))
    }

    pub fn http(policy: HttpPolicy) -> Self {
        PolicyHandle::Http(Arc::new(policy))
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            PolicyHandle::Scripted(_) => "scripted",
            PolicyHandle::Toy(_) => "toy",
            PolicyHandle::Http(_) => "http",
        }
    }

    pub fn generate(&self, request: &GenerateRequest<'_>) -> Result<Generation> {
        if request.messages.is_empty() {
            return Err(Error::Validation("generate called with no messages".into()));
        }
        match self {
            PolicyHandle::Scripted(p) => p.generate(request),
            PolicyHandle::Toy(p) => p.generate(request),
            PolicyHandle::Http(p) => p.generate(request).map_err(Error::from),
        }
    }

    pub fn as_toy(&self) -> Option<&ToySoftmaxPolicy> {
        match self {
            PolicyHandle::Toy(p) => Some(p),
            _ => None,
        }
    }

    /// Mutable access for training. Clones the table if a snapshot still
    /// shares it.
    pub fn toy_mut(&mut self) -> Result<&mut ToySoftmaxPolicy> {
        match self {
            PolicyHandle::Toy(p) => Ok(Arc::make_mut(p)),
            other => Err(Error::UnsupportedBackend(format!(
                "training requires the toy backend, got `{}`",
                other.backend_name()
            ))),
        }
    }
}

/// Index of the user message carrying the question, used by backends that
/// need the raw question text.
pub(crate) fn question_text(messages: &[Message]) -> Option<&str> {
    messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.strip_prefix("Question: ").unwrap_or(&m.content))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_params_defaults() {
        let r = GenParams::rollout(3);
        assert_eq!(r.temperature, 1.0);
        assert_eq!(r.top_p, 1.0);
        assert!(!r.is_greedy());
        assert!(GenParams::greedy(3).is_greedy());
        assert!(r.validate().is_ok());
        assert!(GenParams { top_p: 0.0, ..r.clone() }.validate().is_err());
        assert!(GenParams { temperature: -1.0, ..r }.validate().is_err());
    }

    #[test]
    fn training_rejects_http() {
        let cfg = HttpPolicyConfig::new("http://127.0.0.1:9", "m");
        let mut handle = PolicyHandle::http(HttpPolicy::new(cfg).unwrap());
        assert!(matches!(handle.toy_mut(), Err(Error::UnsupportedBackend(_))));
    }

    #[test]
    fn modes_parse() {
        for m in PromptMode::ALL {
            assert_eq!(m.as_str().parse::<PromptMode>().unwrap(), m);
        }
        assert!("other".parse::<PromptMode>().is_err());
    }
}
