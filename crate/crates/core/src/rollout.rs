//! Multi-turn rollouts.
//!
//! A trajectory starts from `[system prompt, "Question: …"]` and alternates
//! policy turns with environment responses until the policy answers (or
//! assesses), or the turn budget runs out. The environment answers a search
//! with an information block, an over-budget search with a fixed notice, and
//! a malformed turn with the mode's retry prompt.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_information_block_with_limit, Retriever};
use crate::error::{Error, Result};
use crate::labeling::QAInstance;
use crate::policy::{GenParams, GenerateRequest, Message, PolicyHandle, PromptMode};
use crate::prompts::{user_message, PromptKey};
use crate::seed::derive_seed;
use crate::textproto::{exact_match, sub_exact_match, Action, Assessment, GoldAnswers, InvalidReason};

/// Second and later turns in param/decision mode are capped at this many
/// new tokens.
pub const FOLLOW_UP_TOKEN_CAP: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutLimits {
    pub max_turns_search: usize,
    pub max_turns_other: usize,
    pub max_search_calls: usize,
}

impl Default for RolloutLimits {
    fn default() -> Self {
        Self {
            max_turns_search: 4,
            max_turns_other: 2,
            max_search_calls: 3,
        }
    }
}

impl RolloutLimits {
    pub fn turn_budget(&self, mode: PromptMode) -> usize {
        match mode {
            PromptMode::Search => self.max_turns_search,
            PromptMode::Param | PromptMode::Decision => self.max_turns_other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_turns_search == 0 || self.max_turns_other == 0 || self.max_search_calls == 0 {
            return Err(Error::Validation(format!("rollout limits must all be at least 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub policy_output: String,
    pub action: Action,
    /// What the environment sent back; absent on the final turn.
    pub environment_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_token: Option<String>,
    /// Log-probability of `action_token` under the policy that sampled it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_logprob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    Assessment,
    TurnLimit,
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub mode: PromptMode,
    pub system_prompt: PromptKey,
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub num_search_calls: usize,
    pub final_answer: Option<String>,
    pub assessment: Option<Assessment>,
    pub format_ok: bool,
    pub terminated_by: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
}

impl Trajectory {
    pub fn is_backend_failure(&self) -> bool {
        self.terminated_by == Termination::BackendFailure
    }

    /// Checks the structural invariants against the limits that produced it.
    pub fn check_invariants(&self, limits: &RolloutLimits) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("trajectory {}: {msg}", self.question_id)));
        let executed = self
            .turns
            .iter()
            .filter(|t| {
                matches!(t.action, Action::Search(_))
                    && t.environment_response
                        .as_deref()
                        .is_some_and(|r| r != PromptKey::OverBudget.text())
            })
            .count();
        if executed != self.num_search_calls {
            return fail(format!("{} executed searches but num_search_calls = {}", executed, self.num_search_calls));
        }
        if self.num_search_calls > limits.max_search_calls {
            return fail(format!("{} searches exceed the budget", self.num_search_calls));
        }
        if self.turns.len() > limits.turn_budget(self.mode) {
            return fail(format!("{} turns exceed the budget", self.turns.len()));
        }
        if self.mode == PromptMode::Param && self.num_search_calls > 0 {
            return fail("param-mode trajectory executed a search".into());
        }
        if self.mode == PromptMode::Search && self.assessment.is_some() {
            return fail("search-mode trajectory carries an assessment".into());
        }
        if self.mode == PromptMode::Decision && self.final_answer.is_some() {
            return fail("decision-mode trajectory carries an answer".into());
        }
        if let Some((last, rest)) = self.turns.split_last() {
            if last.environment_response.is_some() || rest.iter().any(|t| t.environment_response.is_none()) {
                return fail("environment responses must be present exactly on non-final turns".into());
            }
        }
        Ok(())
    }
}

/// Per-trajectory scoring inputs shared by rewards and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub em: bool,
    pub subem: bool,
    pub m: usize,
    pub has_search: bool,
    pub no_search_predicted: bool,
    pub format_ok: bool,
}

pub fn summarize(trajectory: &Trajectory, golds: &GoldAnswers) -> TrajectorySummary {
    let (em, subem) = match &trajectory.final_answer {
        Some(a) => (exact_match(a, golds), sub_exact_match(a, golds)),
        None => (false, false),
    };
    let m = trajectory.num_search_calls;
    let no_search_predicted = match trajectory.mode {
        PromptMode::Decision => trajectory.assessment == Some(Assessment::Yes),
        _ => m == 0,
    };
    TrajectorySummary {
        em,
        subem,
        m,
        has_search: m > 0,
        no_search_predicted,
        format_ok: trajectory.format_ok,
    }
}

pub fn default_system_prompt(mode: PromptMode) -> PromptKey {
    match mode {
        PromptMode::Param => PromptKey::Param,
        PromptMode::Search => PromptKey::Search,
        PromptMode::Decision => PromptKey::Decision,
    }
}

fn retry_prompt(mode: PromptMode, reason: InvalidReason) -> PromptKey {
    match (mode, reason) {
        (PromptMode::Search, _) => PromptKey::RetrySearch,
        (PromptMode::Param, InvalidReason::SearchInParam) => PromptKey::RetryParamSearch,
        (PromptMode::Param, _) => PromptKey::RetryParam,
        (PromptMode::Decision, _) => PromptKey::RetryDecision,
    }
}

/// Runs one trajectory with the mode's default system prompt.
pub fn run_trajectory(
    policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
    mode: PromptMode,
    limits: &RolloutLimits,
    params: &GenParams,
) -> Result<Trajectory> {
    run_trajectory_with(policy, retriever, question, mode, default_system_prompt(mode), limits, params)
}

/// Runs one trajectory with an explicit system prompt (probe, shaping, …);
/// `mode` still decides how turns are parsed and what the budget is.
///
/// Backend failures end the trajectory with
/// [`Termination::BackendFailure`]; configuration errors (missing fixtures,
/// unknown contexts) are returned as `Err`.
pub fn run_trajectory_with(
    policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
    mode: PromptMode,
    system: PromptKey,
    limits: &RolloutLimits,
    params: &GenParams,
) -> Result<Trajectory> {
    let budget = limits.turn_budget(mode);
    let mut traj = Trajectory {
        question_id: question.id.clone(),
        mode,
        system_prompt: system,
        seed: params.seed,
        turns: Vec::new(),
        num_search_calls: 0,
        final_answer: None,
        assessment: None,
        format_ok: false,
        terminated_by: Termination::TurnLimit,
        backend_error: None,
    };
    let mut messages = vec![
        Message::system(system.text()),
        Message::user(user_message(&question.question)),
    ];
    let follow_up = GenParams {
        max_new_tokens: params.max_new_tokens.min(FOLLOW_UP_TOKEN_CAP),
        ..params.clone()
    };

    for turn in 0..budget {
        let turn_params = if turn > 0 && mode != PromptMode::Search {
            &follow_up
        } else {
            params
        };
        let req = GenerateRequest {
            messages: &messages,
            mode,
            question_id: &question.id,
            turn,
            params: turn_params,
        };
        let generation = match policy.generate(&req) {
            Ok(g) => g,
            Err(Error::Backend(e)) => {
                log::warn!("question {}: {e}", question.id);
                traj.terminated_by = Termination::BackendFailure;
                traj.backend_error = Some(e.to_string());
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        let action = crate::textproto::classify_action(&generation.text, mode);
        let last = turn + 1 == budget;

        let response = match &action {
            Action::Answer(a) => {
                traj.final_answer = Some(a.clone());
                traj.terminated_by = Termination::Answer;
                None
            }
            Action::Assessment(a) => {
                traj.assessment = Some(*a);
                traj.terminated_by = Termination::Assessment;
                None
            }
            _ if last => None,
            Action::Search(query) => {
                if traj.num_search_calls < limits.max_search_calls {
                    traj.num_search_calls += 1;
                    let hits = retriever.retrieve(query, retriever.topk()).unwrap_or_else(|e| {
                        log::warn!("question {}: retrieval failed, continuing with no results: {e}", question.id);
                        Vec::new()
                    });
                    Some(render_information_block_with_limit(&hits, retriever.max_doc_chars()))
                } else {
                    Some(PromptKey::OverBudget.text().to_string())
                }
            }
            Action::Invalid(reason) => Some(retry_prompt(mode, *reason).text().to_string()),
        };

        let done = response.is_none();
        if let Some(r) = &response {
            messages.push(Message::assistant(generation.text.clone()));
            messages.push(Message::user(r.clone()));
        }
        traj.turns.push(Turn {
            policy_output: generation.text,
            action,
            environment_response: response,
            action_token: generation.action_token,
            behavior_logprob: generation.logprob,
        });
        if done {
            break;
        }
    }
    traj.format_ok = matches!(traj.terminated_by, Termination::Answer | Termination::Assessment);
    Ok(traj)
}

/// `group_size` independent trajectories; member `i` uses the seed
/// `derive_seed(params.seed, question.id, i)`. Output order follows `i`.
pub fn run_group(
    policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
    mode: PromptMode,
    group_size: usize,
    limits: &RolloutLimits,
    params: &GenParams,
) -> Result<Vec<Trajectory>> {
    run_group_with(policy, retriever, question, mode, default_system_prompt(mode), group_size, limits, params)
}

#[allow(clippy::too_many_arguments)]
pub fn run_group_with(
    policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
    mode: PromptMode,
    system: PromptKey,
    group_size: usize,
    limits: &RolloutLimits,
    params: &GenParams,
) -> Result<Vec<Trajectory>> {
    if group_size == 0 {
        return Err(Error::Validation("group size must be at least 1".into()));
    }
    (0..group_size as u64)
        .into_par_iter()
        .map(|i| {
            let p = params.with_seed(derive_seed(params.seed, &question.id, i));
            run_trajectory_with(policy, retriever, question, mode, system, limits, &p)
        })
        .collect()
}

/// One line of a trajectory log.
///
/// `seq` is a logical timestamp (order of emission within the run) rather
/// than wall-clock time, so logs from identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seq: u64,
    pub stage: String,
    pub question: String,
    pub limits: RolloutLimits,
    pub params: GenParams,
    pub trajectory: Trajectory,
}

/// Append-only JSONL writer assigning sequence numbers.
pub struct TrajectoryLog<W: Write> {
    out: W,
    next_seq: u64,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, next_seq: 0 }
    }

    pub fn append(
        &mut self,
        stage: &str,
        question: &QAInstance,
        limits: &RolloutLimits,
        params: &GenParams,
        trajectory: &Trajectory,
    ) -> Result<()> {
        let record = TrajectoryRecord {
            seq: self.next_seq,
            stage: stage.to_string(),
            question: question.question.clone(),
            limits: *limits,
            params: params.clone(),
            trajectory: trajectory.clone(),
        };
        self.next_seq += 1;
        serde_json::to_writer(&mut self.out, &record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("<trajectory log>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Re-runs a logged trajectory and returns the fresh copy; callers compare
/// it with `record.trajectory`.
pub fn replay(
    record: &TrajectoryRecord,
    policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
) -> Result<Trajectory> {
    if question.id != record.trajectory.question_id {
        return Err(Error::Validation(format!(
            "replay question `{}` does not match logged `{}`",
            question.id, record.trajectory.question_id
        )));
    }
    run_trajectory_with(
        policy,
        retriever,
        question,
        record.trajectory.mode,
        record.trajectory.system_prompt,
        &record.limits,
        &record.params,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, Corpus, Document, EmptyRetriever, IndexParams, NO_RESULTS};
    use crate::policy::{ScriptedPolicy, ScriptedProfile};

    fn q(id: &str, question: &str, gold: &str) -> QAInstance {
        QAInstance::new(id, question, GoldAnswers::new([gold]).unwrap(), "toy")
    }

    fn southrey() -> QAInstance {
        q("q2", "Which village is Southrey near?", "Bardney")
    }

    fn index() -> crate::corpus::Bm25Index {
        let corpus = Corpus::from_documents(vec![
            Document {
                id: "d1".into(),
                title: "Southrey".into(),
                text: "Southrey is a village near Bardney.".into(),
            },
            Document {
                id: "d2".into(),
                title: "Lincoln".into(),
                text: "Lincoln is a city.".into(),
            },
        ])
        .unwrap();
        build_index(&corpus, IndexParams::default())
    }

    #[test]
    fn search_then_answer() {
        let policy = PolicyHandle::scripted(
            ScriptedPolicy::new()
                .with_fixture(PromptMode::Search, "q2", 0, "I need to look this up. <search>Southrey village</search>")
                .with_fixture(PromptMode::Search, "q2", 1, "The village is <answer>Bardney</answer>"),
        );
        let t = run_trajectory(
            &policy,
            &index(),
            &southrey(),
            PromptMode::Search,
            &RolloutLimits::default(),
            &GenParams::greedy(0),
        )
        .unwrap();
        assert_eq!(t.num_search_calls, 1);
        assert_eq!(t.final_answer.as_deref(), Some("Bardney"));
        assert!(t.format_ok);
        assert_eq!(t.terminated_by, Termination::Answer);
        let info = t.turns[0].environment_response.as_deref().unwrap();
        assert!(info.starts_with("<information>\nDoc 1: \"Southrey\""));
        assert!(t.turns[1].environment_response.is_none());
        t.check_invariants(&RolloutLimits::default()).unwrap();
    }

    #[test]
    fn param_nudge_after_search_tag() {
        let policy = PolicyHandle::scripted(
            ScriptedPolicy::new()
                .with_fixture(PromptMode::Param, "q2", 0, "<search>Southrey</search>")
                .with_fixture(PromptMode::Param, "q2", 1, "<answer>Bardney</answer>"),
        );
        let t = run_trajectory(
            &policy,
            &EmptyRetriever,
            &southrey(),
            PromptMode::Param,
            &RolloutLimits::default(),
            &GenParams::greedy(0),
        )
        .unwrap();
        assert_eq!(t.num_search_calls, 0);
        assert_eq!(t.turns.len(), 2);
        assert!(t.format_ok);
        assert_eq!(
            t.turns[0].environment_response.as_deref(),
            Some(PromptKey::RetryParamSearch.text())
        );
    }

    #[test]
    fn excess_searches_hit_budgets() {
        let mut sp = ScriptedPolicy::new();
        for turn in 0..5 {
            sp.insert_fixture(PromptMode::Search, "q2", turn, "<search>Southrey</search>");
        }
        let limits = RolloutLimits::default();
        let t = run_trajectory(
            &PolicyHandle::scripted(sp),
            &index(),
            &southrey(),
            PromptMode::Search,
            &limits,
            &GenParams::greedy(0),
        )
        .unwrap();
        assert_eq!(t.num_search_calls, 3);
        assert_eq!(t.turns.len(), 4);
        assert_eq!(t.terminated_by, Termination::TurnLimit);
        assert!(!t.format_ok);
        assert!(t.final_answer.is_none());
        t.check_invariants(&limits).unwrap();
    }

    #[test]
    fn over_budget_notice() {
        let mut sp = ScriptedPolicy::new();
        for turn in 0..3 {
            sp.insert_fixture(PromptMode::Search, "q2", turn, "<search>Southrey</search>");
        }
        sp.insert_fixture(PromptMode::Search, "q2", 3, "<answer>Bardney</answer>");
        let limits = RolloutLimits {
            max_search_calls: 2,
            ..RolloutLimits::default()
        };
        let t = run_trajectory(
            &PolicyHandle::scripted(sp),
            &index(),
            &southrey(),
            PromptMode::Search,
            &limits,
            &GenParams::greedy(0),
        )
        .unwrap();
        assert_eq!(t.num_search_calls, 2);
        assert_eq!(t.turns[2].environment_response.as_deref(), Some(PromptKey::OverBudget.text()));
        assert!(t.format_ok);
        t.check_invariants(&limits).unwrap();
    }

    #[test]
    fn decision_retry_then_turn_limit() {
        let policy = PolicyHandle::scripted(
            ScriptedPolicy::new()
                .with_fixture(PromptMode::Decision, "q2", 0, "<assessment>maybe</assessment>")
                .with_fixture(PromptMode::Decision, "q2", 1, "still unsure"),
        );
        let t = run_trajectory(
            &policy,
            &EmptyRetriever,
            &southrey(),
            PromptMode::Decision,
            &RolloutLimits::default(),
            &GenParams::greedy(0),
        )
        .unwrap();
        assert_eq!(t.terminated_by, Termination::TurnLimit);
        assert!(t.assessment.is_none());
        assert_eq!(
            t.turns[0].environment_response.as_deref(),
            Some(PromptKey::RetryDecision.text())
        );
        let s = summarize(&t, &GoldAnswers::new(["Bardney"]).unwrap());
        assert!(!s.no_search_predicted);
    }

    #[test]
    fn empty_retrieval_renders_placeholder() {
        let policy = PolicyHandle::scripted(
            ScriptedPolicy::new()
                .with_fixture(PromptMode::Search, "q2", 0, "<search>zzz</search>")
                .with_fixture(PromptMode::Search, "q2", 1, "<answer>x</answer>"),
        );
        let t = run_trajectory(
            &policy,
            &EmptyRetriever,
            &southrey(),
            PromptMode::Search,
            &RolloutLimits::default(),
            &GenParams::greedy(0),
        )
        .unwrap();
        assert!(t.turns[0].environment_response.as_deref().unwrap().contains(NO_RESULTS));
    }

    #[test]
    fn summaries() {
        let golds = GoldAnswers::new(["Bardney"]).unwrap();
        let mut t = Trajectory {
            question_id: "q".into(),
            mode: PromptMode::Search,
            system_prompt: PromptKey::Search,
            seed: 0,
            turns: vec![],
            num_search_calls: 2,
            final_answer: Some("Bardney".into()),
            assessment: None,
            format_ok: true,
            terminated_by: Termination::Answer,
            backend_error: None,
        };
        let s = summarize(&t, &golds);
        assert!(s.em && s.subem && s.has_search && !s.no_search_predicted);
        assert_eq!(s.m, 2);

        t.mode = PromptMode::Decision;
        t.final_answer = None;
        t.num_search_calls = 0;
        t.assessment = Some(Assessment::Yes);
        assert!(summarize(&t, &golds).no_search_predicted);

        t.mode = PromptMode::Search;
        t.assessment = None;
        t.terminated_by = Termination::TurnLimit;
        let s = summarize(&t, &golds);
        assert!(!s.em && !s.subem);
    }

    #[test]
    fn groups_are_ordered_and_reproducible() {
        let question = southrey();
        let det = PolicyHandle::scripted(
            ScriptedPolicy::new().with_fixture(PromptMode::Param, "q2", 0, "<answer>Bardney</answer>"),
        );
        let g = run_group(&det, &EmptyRetriever, &question, PromptMode::Param, 5, &RolloutLimits::default(), &GenParams::rollout(1))
            .unwrap();
        assert_eq!(g.len(), 5);
        assert!(g.iter().all(|t| t.turns == g[0].turns));

        let always = PolicyHandle::scripted(
            ScriptedPolicy::new().with_profile("q2", ScriptedProfile::new("Bardney", "Lincoln").with_param_solve(1.0)),
        );
        let g = run_group(&always, &EmptyRetriever, &question, PromptMode::Param, 10, &RolloutLimits::default(), &GenParams::rollout(1))
            .unwrap();
        assert!(g.iter().all(|t| summarize(t, &question.golds).em));

        let half = PolicyHandle::scripted(
            ScriptedPolicy::new().with_profile("q2", ScriptedProfile::new("Bardney", "Lincoln").with_param_solve(0.5)),
        );
        let a = run_group(&half, &EmptyRetriever, &question, PromptMode::Param, 16, &RolloutLimits::default(), &GenParams::rollout(9))
            .unwrap();
        let b = run_group(&half, &EmptyRetriever, &question, PromptMode::Param, 16, &RolloutLimits::default(), &GenParams::rollout(9))
            .unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().any(|t| summarize(t, &question.golds).em));
        assert!(a.iter().any(|t| !summarize(t, &question.golds).em));
        assert!(run_group(&half, &EmptyRetriever, &question, PromptMode::Param, 0, &RolloutLimits::default(), &GenParams::rollout(9)).is_err());
    }

    #[test]
    fn log_round_trip_and_replay() {
        let question = southrey();
        let policy = PolicyHandle::scripted(
            ScriptedPolicy::new().with_profile("q2", ScriptedProfile::new("Bardney", "Lincoln").with_searches(2)),
        );
        let idx = index();
        let limits = RolloutLimits::default();
        let params = GenParams::rollout(5);
        let traj = run_trajectory(&policy, &idx, &question, PromptMode::Search, &limits, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = TrajectoryLog::new(Vec::new());
        log.append("test", &question, &limits, &params, &traj).unwrap();
        log.append("test", &question, &limits, &params, &traj).unwrap();
        std::fs::write(&path, log.into_inner()).unwrap();
        let records = read_trajectory_log(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].seq, 1);
        assert_eq!(records[0].trajectory, traj);
        assert_eq!(replay(&records[0], &policy, &idx, &question).unwrap(), traj);
    }

    #[test]
    fn missing_fixture_propagates() {
        let policy = PolicyHandle::scripted(ScriptedPolicy::new());
        let err = run_trajectory(
            &policy,
            &EmptyRetriever,
            &southrey(),
            PromptMode::Param,
            &RolloutLimits::default(),
            &GenParams::greedy(0),
        )
        .unwrap_err();
        assert!(err.is_config());
    }
}
