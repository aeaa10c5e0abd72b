//! Prompt assets, shipped as text files under `assets/prompts/` and keyed by
//! name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKey {
    /// Knowledge-probing system prompt used for dataset construction.
    Probe,
    /// `s_param`: answer from parametric knowledge only.
    Param,
    /// `s_search`: answer with access to the search engine.
    Search,
    /// `s_decision`: emit a yes/no self-assessment.
    Decision,
    /// Search prompt used by the reward-shaping baselines.
    Shaping,
    Direct,
    Rag,
    User,
    RagUser,
    RetrySearch,
    RetryParam,
    RetryParamSearch,
    RetryDecision,
    OverBudget,
}

impl PromptKey {
    pub const ALL: [PromptKey; 14] = [
        PromptKey::Probe,
        PromptKey::Param,
        PromptKey::Search,
        PromptKey::Decision,
        PromptKey::Shaping,
        PromptKey::Direct,
        PromptKey::Rag,
        PromptKey::User,
        PromptKey::RagUser,
        PromptKey::RetrySearch,
        PromptKey::RetryParam,
        PromptKey::RetryParamSearch,
        PromptKey::RetryDecision,
        PromptKey::OverBudget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKey::Probe => "probe",
            PromptKey::Param => "param",
            PromptKey::Search => "search",
            PromptKey::Decision => "decision",
            PromptKey::Shaping => "shaping",
            PromptKey::Direct => "direct",
            PromptKey::Rag => "rag",
            PromptKey::User => "user",
            PromptKey::RagUser => "rag_user",
            PromptKey::RetrySearch => "retry_search",
            PromptKey::RetryParam => "retry_param",
            PromptKey::RetryParamSearch => "retry_param_search",
            PromptKey::RetryDecision => "retry_decision",
            PromptKey::OverBudget => "over_budget",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            PromptKey::Probe => include_str!("../assets/prompts/probe.txt"),
            PromptKey::Param => include_str!("../assets/prompts/param.txt"),
            PromptKey::Search => include_str!("../assets/prompts/search.txt"),
            PromptKey::Decision => include_str!("../assets/prompts/decision.txt"),
            PromptKey::Shaping => include_str!("../assets/prompts/shaping.txt"),
            PromptKey::Direct => include_str!("../assets/prompts/direct.txt"),
            PromptKey::Rag => include_str!("../assets/prompts/rag.txt"),
            PromptKey::User => include_str!("../assets/prompts/user.txt"),
            PromptKey::RagUser => include_str!("../assets/prompts/rag_user.txt"),
            PromptKey::RetrySearch => include_str!("../assets/prompts/retry_search.txt"),
            PromptKey::RetryParam => include_str!("../assets/prompts/retry_param.txt"),
            PromptKey::RetryParamSearch => {
                include_str!("../assets/prompts/retry_param_search.txt")
            }
            PromptKey::RetryDecision => include_str!("../assets/prompts/retry_decision.txt"),
            PromptKey::OverBudget => include_str!("../assets/prompts/over_budget.txt"),
        }
    }
}

impl fmt::Display for PromptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.strip_prefix("s_").unwrap_or(s);
        PromptKey::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "probing" && *k == PromptKey::Probe))
            .ok_or_else(|| Error::Config(format!("unknown prompt `{s}`")))
    }
}

/// The default user turn: `Question: {question}`.
pub fn user_message(question: &str) -> String {
    PromptKey::User.text().replace("{question}", question)
}

/// User turn for the single-shot RAG baseline.
pub fn rag_user_message(question: &str, documents: &[String; 3]) -> String {
    PromptKey::RagUser
        .text()
        .replace("{document_1}", &documents[0])
        .replace("{document_2}", &documents[1])
        .replace("{document_3}", &documents[2])
        .replace("{question}", question)
}
