use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{question_text, GenerateRequest, Generation, PromptMode};
use crate::error::{Error, Result};
use crate::seed::{self, SeedMixer};
use crate::textproto::Assessment;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FixtureKey {
    pub mode: PromptMode,
    pub question_id: String,
    pub turn: usize,
    /// Restricts the fixture to one sampling seed; `None` matches any seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// How a profile answers the decision prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DecisionRule {
    Yes,
    No,
    /// `yes` iff the profile's `param_solve >= rho`.
    Threshold { rho: f64 },
    /// `yes` with probability `p_yes`; greedy picks the likelier token.
    Bernoulli { p_yes: f64 },
    /// Emits an assessment tag with unusable content.
    Malformed,
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule::Threshold { rho: 0.5 }
    }
}

/// Stochastic behaviour for one question.
///
/// Param mode answers `answer` with probability `param_solve`, otherwise
/// `distractor`. Search mode issues `searches` search calls and then answers
/// correctly with probability `search_solve`. Under greedy decoding every
/// Bernoulli draw resolves to its more likely outcome (`p >= 0.5` wins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    pub answer: String,
    pub distractor: String,
    #[serde(default)]
    pub param_solve: f64,
    #[serde(default = "one")]
    pub search_solve: f64,
    #[serde(default = "one_usize")]
    pub searches: usize,
    #[serde(default)]
    pub decision: DecisionRule,
    /// Query text; defaults to the question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl ScriptedProfile {
    pub fn new(answer: impl Into<String>, distractor: impl Into<String>) -> Self {
        Self {
            answer: answer.into(),
            distractor: distractor.into(),
            param_solve: 0.0,
            search_solve: 1.0,
            searches: 1,
            decision: DecisionRule::default(),
            query: None,
        }
    }

    pub fn with_param_solve(mut self, p: f64) -> Self {
        self.param_solve = p;
        self
    }

    pub fn with_search_solve(mut self, p: f64) -> Self {
        self.search_solve = p;
        self
    }

    pub fn with_searches(mut self, n: usize) -> Self {
        self.searches = n;
        self
    }

    pub fn with_decision(mut self, rule: DecisionRule) -> Self {
        self.decision = rule;
        self
    }

    fn validate(&self, qid: &str) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("profile `{qid}`: {name} = {v} is outside [0,1]")))
            }
        };
        unit("param_solve", self.param_solve)?;
        unit("search_solve", self.search_solve)?;
        match self.decision {
            DecisionRule::Threshold { rho } => unit("decision.rho", rho)?,
            DecisionRule::Bernoulli { p_yes } => unit("decision.p_yes", p_yes)?,
            _ => {}
        }
        Ok(())
    }
}

/// On-disk form of a scripted policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFile {
    #[serde(default)]
    pub fixtures: Vec<FixtureEntry>,
    #[serde(default)]
    pub profiles: BTreeMap<String, ScriptedProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub mode: PromptMode,
    pub question_id: String,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub output: String,
}

/// Deterministic or seeded-stochastic scripted backend.
///
/// Output is a pure function of `(mode, question id, turn, seed)`. Fixtures
/// take precedence over profiles.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    fixtures: BTreeMap<FixtureKey, String>,
    profiles: BTreeMap<String, ScriptedProfile>,
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(
        mut self,
        mode: PromptMode,
        question_id: &str,
        turn: usize,
        output: impl Into<String>,
    ) -> Self {
        self.insert_fixture(mode, question_id, turn, output);
        self
    }

    /// A fixture that only applies when the request carries `seed`.
    pub fn with_seeded_fixture(
        mut self,
        mode: PromptMode,
        question_id: &str,
        turn: usize,
        seed: u64,
        output: impl Into<String>,
    ) -> Self {
        self.fixtures.insert(
            FixtureKey {
                mode,
                question_id: question_id.to_string(),
                turn,
                seed: Some(seed),
            },
            output.into(),
        );
        self
    }

    pub fn insert_fixture(
        &mut self,
        mode: PromptMode,
        question_id: &str,
        turn: usize,
        output: impl Into<String>,
    ) {
        self.fixtures.insert(
            FixtureKey {
                mode,
                question_id: question_id.to_string(),
                turn,
                seed: None,
            },
            output.into(),
        );
    }

    pub fn with_profile(mut self, question_id: &str, profile: ScriptedProfile) -> Self {
        self.profiles.insert(question_id.to_string(), profile);
        self
    }

    pub fn profile(&self, question_id: &str) -> Option<&ScriptedProfile> {
        self.profiles.get(question_id)
    }

    pub fn from_file(file: ScriptedFile) -> Result<Self> {
        let mut policy = Self::new();
        for (qid, profile) in file.profiles {
            profile.validate(&qid)?;
            policy.profiles.insert(qid, profile);
        }
        for f in file.fixtures {
            policy.fixtures.insert(
                FixtureKey {
                    mode: f.mode,
                    question_id: f.question_id,
                    turn: f.turn,
                    seed: f.seed,
                },
                f.output,
            );
        }
        Ok(policy)
    }

    pub fn to_file(&self) -> ScriptedFile {
        ScriptedFile {
            fixtures: self
                .fixtures
                .iter()
                .map(|(k, v)| FixtureEntry {
                    mode: k.mode,
                    question_id: k.question_id.clone(),
                    turn: k.turn,
                    seed: k.seed,
                    output: v.clone(),
                })
                .collect(),
            profiles: self.profiles.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ScriptedFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_file())?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub(super) fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation> {
        let mut key = FixtureKey {
            mode: req.mode,
            question_id: req.question_id.to_string(),
            turn: req.turn,
            seed: Some(req.params.seed),
        };
        if let Some(out) = self.fixtures.get(&key) {
            return Ok(Generation::text(out.clone()));
        }
        key.seed = None;
        if let Some(out) = self.fixtures.get(&key) {
            return Ok(Generation::text(out.clone()));
        }
        let profile = self.profiles.get(req.question_id).ok_or_else(|| {
            Error::Config(format!(
                "scripted policy has no fixture for ({}, {}, turn {}) and no profile for the question",
                req.mode, req.question_id, req.turn
            ))
        })?;
        Ok(Generation::text(render_profile(profile, req)))
    }
}

/// One Bernoulli draw per (seed, mode, question), shared by every turn of a
/// trajectory so retries do not re-roll the outcome.
fn draw(req: &GenerateRequest<'_>, salt: &str, p: f64) -> bool {
    if req.params.is_greedy() {
        return p >= 0.5;
    }
    let s = SeedMixer::new(req.params.seed)
        .str(req.mode.as_str())
        .str(req.question_id)
        .str(salt)
        .finish();
    seed::rng(s).random::<f64>() < p
}

fn render_profile(profile: &ScriptedProfile, req: &GenerateRequest<'_>) -> String {
    match req.mode {
        PromptMode::Param => {
            let ans = if draw(req, "solve", profile.param_solve) {
                &profile.answer
            } else {
                &profile.distractor
            };
            format!("Let me recall what I know about this. <answer>{ans}</answer>")
        }
        PromptMode::Search => {
            if req.turn < profile.searches {
                let query = profile
                    .query
                    .as_deref()
                    .or_else(|| question_text(req.messages))
                    .unwrap_or("");
                format!("I need more information. <search>{query}</search>")
            } else {
                let ans = if draw(req, "solve", profile.search_solve) {
                    &profile.answer
                } else {
                    &profile.distractor
                };
                format!("Based on the documents, <answer>{ans}</answer>")
            }
        }
        PromptMode::Decision => {
            let decision = match profile.decision {
                DecisionRule::Yes => Assessment::Yes,
                DecisionRule::No => Assessment::No,
                DecisionRule::Threshold { rho } => Assessment::from_bool(profile.param_solve >= rho),
                DecisionRule::Bernoulli { p_yes } => Assessment::from_bool(draw(req, "decide", p_yes)),
                DecisionRule::Malformed => {
                    return "I am unsure. <assessment>maybe</assessment>".to_string();
                }
            };
            format!("Step 1: consider what I know. {}", decision.render())
        }
    }
}
