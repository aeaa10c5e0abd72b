//! Orchestration: run configuration, two-stage inference, benchmark
//! evaluation and the artifact-producing commands behind the CLI.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_index, load_corpus, Bm25Index, EmptyRetriever, IndexParams, RemoteRetriever, Retriever};
use crate::error::{Error, Result};
use crate::grpo::{self, TrainConfig, TrainOutcome};
use crate::labeling::{self, LabelingConfig, QAInstance};
use crate::metrics::{self, InstanceResult, Report};
use crate::policy::{
    ContextKey, GenParams, HttpPolicy, HttpPolicyConfig, PolicyHandle, PromptMode, ScriptedPolicy, ToySoftmaxPolicy,
};
use crate::prompts::PromptKey;
use crate::rewards::RewardSpec;
use crate::rollout::{run_trajectory, run_trajectory_with, summarize, RolloutLimits, Trajectory, TrajectoryLog};
use crate::seed::derive_seed;
use crate::textproto::Assessment;

/// Which policy backend to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Fixtures and profiles from a JSON file.
    Scripted { path: PathBuf },
    /// Tabular policy over every configured question, optionally
    /// initialised from a checkpoint.
    Toy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<PathBuf>,
    },
    /// Chat-completion endpoint; unset fields fall back to the
    /// `ADASEARCH_LLM_*` environment variables.
    Http {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Decision prompt, then param or search prompt.
    #[default]
    TwoStage,
    /// One search-capable prompt; the policy decides implicitly whether to
    /// search.
    Single,
}

/// Thresholds checked by `evaluate --assert`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_macro_em: Option<f64>,
    pub min_macro_f1_aware: Option<f64>,
    pub min_micro_f1_aware: Option<f64>,
    pub max_micro_avg_search: Option<f64>,
}

impl Thresholds {
    /// Human-readable descriptions of every violated threshold.
    pub fn violations(&self, report: &Report) -> Vec<String> {
        let mut out = Vec::new();
        let mut min = |name: &str, got: f64, want: Option<f64>| {
            if let Some(w) = want {
                if got < w {
                    out.push(format!("{name} = {got:.4} < {w}"));
                }
            }
        };
        min("macro_em", report.macro_em, self.min_macro_em);
        min("macro_f1_aware", report.macro_f1_aware, self.min_macro_f1_aware);
        min("micro_f1_aware", report.micro_f1_aware, self.min_micro_f1_aware);
        if let Some(max) = self.max_micro_avg_search {
            if report.micro_avg_search > max {
                out.push(format!("micro_avg_search = {:.4} > {max}", report.micro_avg_search));
            }
        }
        out
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_rate() -> f64 {
    metrics::DEFAULT_RATE_PER_1000
}

fn default_retriever_timeout() -> u64 {
    30_000
}

fn default_baseline_prompt() -> PromptKey {
    PromptKey::Search
}

fn default_n_per_bucket() -> usize {
    labeling::DEFAULT_TRAIN_PER_BUCKET
}

fn default_n_val_per_bucket() -> usize {
    labeling::DEFAULT_VALIDATION_PER_BUCKET
}

/// Everything a run needs. Loaded from TOML; relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    /// Prebuilt index written by the `index` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_path: Option<PathBuf>,
    /// `POST {url}/retrieve` retriever; overrides the local index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever_url: Option<String>,
    #[serde(default = "default_retriever_timeout")]
    pub retriever_timeout_ms: u64,
    /// Benchmark name to dataset file.
    #[serde(default)]
    pub datasets: BTreeMap<String, PathBuf>,
    /// Validation set for stage-2 checkpoint selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_path: Option<PathBuf>,
    /// Unfiltered input for `build-dataset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_dataset: Option<PathBuf>,
    /// Label file for stage-2 training; defaults to `<output_dir>/labels.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_backend: Option<BackendConfig>,
    #[serde(default)]
    pub agent: AgentKind,
    #[serde(default = "default_baseline_prompt")]
    pub baseline_prompt: PromptKey,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub limits: RolloutLimits,
    #[serde(default)]
    pub index: IndexParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_rate")]
    pub rate_per_1000: f64,
    #[serde(default = "default_n_per_bucket")]
    pub n_per_bucket: usize,
    #[serde(default = "default_n_val_per_bucket")]
    pub n_val_per_bucket: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys reach
    /// into tables; values are TOML literals, falling back to strings) and
    /// resolves relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate_values()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    fn for_each_path(&mut self, mut f: impl FnMut(&mut PathBuf)) {
        f(&mut self.output_dir);
        for p in [
            &mut self.corpus_path,
            &mut self.index_path,
            &mut self.validation_path,
            &mut self.raw_dataset,
            &mut self.labels_path,
        ]
        .into_iter()
        .flatten()
        {
            f(p);
        }
        for p in self.datasets.values_mut() {
            f(p);
        }
        for b in [&mut self.decision_backend, &mut self.solve_backend].into_iter().flatten() {
            match b {
                BackendConfig::Scripted { path } => f(path),
                BackendConfig::Toy { checkpoint: Some(p) } => f(p),
                _ => {}
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.for_each_path(|p| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        });
    }

    fn validate_values(&self) -> Result<()> {
        self.train.validate().map_err(to_config)?;
        self.labeling.validate().map_err(to_config)?;
        self.limits.validate().map_err(to_config)?;
        self.index.validate().map_err(to_config)?;
        self.reward.validate().map_err(to_config)?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.rate_per_1000.is_nan() || self.rate_per_1000 < 0.0 {
            return Err(Error::Config("rate_per_1000 must be non-negative".into()));
        }
        Ok(())
    }

    /// Every input path named by the config must exist.
    pub fn validate_paths(&self) -> Result<()> {
        let mut inputs: Vec<(&str, &Path)> = Vec::new();
        if let Some(p) = &self.corpus_path {
            inputs.push(("corpus_path", p));
        }
        if let Some(p) = &self.index_path {
            inputs.push(("index_path", p));
        }
        if let Some(p) = &self.validation_path {
            inputs.push(("validation_path", p));
        }
        if let Some(p) = &self.raw_dataset {
            inputs.push(("raw_dataset", p));
        }
        if let Some(p) = &self.labels_path {
            inputs.push(("labels_path", p));
        }
        for (name, p) in &self.datasets {
            inputs.push((name.as_str(), p));
        }
        for b in [&self.decision_backend, &self.solve_backend].into_iter().flatten() {
            match b {
                BackendConfig::Scripted { path } => inputs.push(("scripted backend", path)),
                BackendConfig::Toy { checkpoint: Some(p) } => inputs.push(("toy checkpoint", p)),
                _ => {}
            }
        }
        for (what, p) in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("{what}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The config as echoed into reports: paths are reduced to file names
    /// and the output location is dropped, so reruns from another working
    /// directory or into another output directory compare equal.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.for_each_path(|p| {
            if let Some(name) = p.file_name() {
                *p = PathBuf::from(name);
            }
        });
        let mut v = serde_json::to_value(&c).unwrap_or(serde_json::Value::Null);
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        v
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Config(m),
        other => other,
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Loads every configured benchmark. Each instance's `benchmark` is set to
/// its config key.
pub fn load_benchmarks(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<QAInstance>>> {
    let mut out = BTreeMap::new();
    for (name, path) in &cfg.datasets {
        let mut qs = labeling::load_dataset(path)?;
        for q in &mut qs {
            q.benchmark = name.clone();
        }
        out.insert(name.clone(), qs);
    }
    Ok(out)
}

fn all_questions(benchmarks: &BTreeMap<String, Vec<QAInstance>>) -> Vec<QAInstance> {
    benchmarks.values().flatten().cloned().collect()
}

pub fn build_policy(backend: &BackendConfig, questions: &[QAInstance]) -> Result<PolicyHandle> {
    match backend {
        BackendConfig::Scripted { path } => Ok(PolicyHandle::scripted(ScriptedPolicy::load(path)?)),
        BackendConfig::Toy { checkpoint } => {
            let mut toy = ToySoftmaxPolicy::for_dataset(questions);
            if let Some(p) = checkpoint {
                toy.load_into(p)?;
            }
            Ok(PolicyHandle::toy(toy))
        }
        BackendConfig::Http {
            base_url,
            model,
            timeout_ms,
        } => {
            let mut cfg = match (base_url, model) {
                (Some(u), Some(m)) => {
                    let mut c = HttpPolicyConfig::new(u.clone(), m.clone());
                    c.api_key = std::env::var("ADASEARCH_LLM_KEY").ok().filter(|k| !k.is_empty());
                    c
                }
                _ => {
                    let mut c = HttpPolicyConfig::from_env()?;
                    if let Some(u) = base_url {
                        c.base_url = u.clone();
                    }
                    if let Some(m) = model {
                        c.model = m.clone();
                    }
                    c
                }
            };
            if let Some(t) = timeout_ms {
                cfg.timeout_ms = *t;
            }
            Ok(PolicyHandle::http(HttpPolicy::new(cfg)?))
        }
    }
}

fn require_backend<'a>(b: &'a Option<BackendConfig>, name: &str) -> Result<&'a BackendConfig> {
    b.as_ref()
        .ok_or_else(|| Error::Config(format!("`{name}` is not configured")))
}

pub fn build_retriever(cfg: &RunConfig) -> Result<Box<dyn Retriever>> {
    if let Some(url) = &cfg.retriever_url {
        return Ok(Box::new(RemoteRetriever::new(
            url,
            cfg.index.topk,
            Duration::from_millis(cfg.retriever_timeout_ms),
        )?));
    }
    if let Some(p) = &cfg.index_path {
        let path = if p.is_dir() { p.join(INDEX_FILE) } else { p.clone() };
        return Ok(Box::new(Bm25Index::load(&path)?));
    }
    if let Some(p) = &cfg.corpus_path {
        return Ok(Box::new(build_index(&load_corpus(p)?, cfg.index)));
    }
    log::warn!("no corpus, index or retriever configured; searches return no results");
    Ok(Box::new(EmptyRetriever))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub question_id: String,
    pub decision: Assessment,
    /// Stage 1 produced no valid assessment and the agent fell back to
    /// searching.
    pub fallback: bool,
    pub answer: Option<String>,
    pub decision_trajectory: Trajectory,
    pub solve_trajectory: Trajectory,
}

impl InferenceResult {
    pub fn backend_failure(&self) -> bool {
        self.decision_trajectory.is_backend_failure() || self.solve_trajectory.is_backend_failure()
    }
}

/// Stage 1 asks the decision prompt whether parametric knowledge suffices;
/// stage 2 answers with the param prompt on `yes` and the search prompt
/// otherwise. Stage 2 starts a fresh conversation: only its own system
/// prompt and the question.
pub fn two_stage_infer(
    decision_policy: &PolicyHandle,
    solve_policy: &PolicyHandle,
    retriever: &dyn Retriever,
    question: &QAInstance,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<InferenceResult> {
    let params = GenParams::greedy(seed);
    let decision_trajectory = run_trajectory(
        decision_policy,
        &EmptyRetriever,
        question,
        PromptMode::Decision,
        limits,
        &params,
    )?;
    let (decision, fallback) = match decision_trajectory.assessment {
        Some(a) => (a, false),
        None => (Assessment::No, true),
    };
    let mode = match decision {
        Assessment::Yes => PromptMode::Param,
        Assessment::No => PromptMode::Search,
    };
    let solve_trajectory = run_trajectory(solve_policy, retriever, question, mode, limits, &params)?;
    Ok(InferenceResult {
        question_id: question.id.clone(),
        decision,
        fallback,
        answer: solve_trajectory.final_answer.clone(),
        decision_trajectory,
        solve_trajectory,
    })
}

/// The agent under evaluation.
#[derive(Debug, Clone)]
pub enum Agent {
    TwoStage {
        decision: PolicyHandle,
        solve: PolicyHandle,
    },
    /// A single search-mode prompt. `policy` also serves the parametric
    /// oracle.
    Single { policy: PolicyHandle, system: PromptKey },
}

impl Agent {
    fn oracle_policy(&self) -> &PolicyHandle {
        match self {
            Agent::TwoStage { solve, .. } => solve,
            Agent::Single { policy, .. } => policy,
        }
    }
}

/// One evaluated question plus the trajectories behind it, tagged by stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub result: InstanceResult,
    pub trajectories: Vec<(&'static str, Trajectory)>,
}

fn evaluate_one(
    agent: &Agent,
    retriever: &dyn Retriever,
    q: &QAInstance,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<Evaluated> {
    let s = derive_seed(seed, &q.id, 0);
    let mut trajectories = Vec::new();
    let (em, subem, predicted_no_search, searches, decision, mut failure, own_oracle) = match agent {
        Agent::TwoStage { decision, solve } => {
            let r = two_stage_infer(decision, solve, retriever, q, limits, s)?;
            let summary = summarize(&r.solve_trajectory, &q.golds);
            let predicted = r.decision == Assessment::Yes;
            let from_trajectory = summarize(&r.decision_trajectory, &q.golds).no_search_predicted;
            if predicted != from_trajectory {
                return Err(Error::Validation(format!(
                    "question {}: decision {} disagrees with its trajectory",
                    q.id, r.decision
                )));
            }
            let failure = r.backend_failure();
            trajectories.push(("decision", r.decision_trajectory));
            trajectories.push(("solve", r.solve_trajectory));
            (summary.em, summary.subem, predicted, summary.m, Some(r.decision), failure, None)
        }
        Agent::Single { policy, system } => {
            let t = run_trajectory_with(
                policy,
                retriever,
                q,
                PromptMode::Search,
                *system,
                limits,
                &GenParams::greedy(s),
            )?;
            let summary = summarize(&t, &q.golds);
            let failure = t.is_backend_failure();
            trajectories.push(("single", t));
            // a trajectory that never searched is its own parametric oracle
            let own = (!summary.has_search).then_some(summary.em);
            (summary.em, summary.subem, summary.no_search_predicted, summary.m, None, failure, own)
        }
    };
    let oracle = match own_oracle {
        Some(o) => o,
        None => {
            let t = run_trajectory(
                agent.oracle_policy(),
                &EmptyRetriever,
                q,
                PromptMode::Param,
                limits,
                &GenParams::greedy(s),
            )?;
            failure |= t.is_backend_failure();
            let em = summarize(&t, &q.golds).em;
            trajectories.push(("oracle", t));
            em
        }
    };
    Ok(Evaluated {
        result: InstanceResult {
            question_id: q.id.clone(),
            benchmark: q.benchmark.clone(),
            em,
            subem,
            predicted_no_search,
            oracle,
            searches: searches as u64,
            decision,
            backend_failure: failure,
        },
        trajectories,
    })
}

/// Greedy evaluation of `agent` on every question of `dataset`, fanned out
/// over the current rayon pool. Results keep dataset order.
pub fn evaluate_benchmark(
    agent: &Agent,
    retriever: &dyn Retriever,
    dataset: &[QAInstance],
    limits: &RolloutLimits,
    seed: u64,
) -> Result<Vec<Evaluated>> {
    dataset
        .par_iter()
        .map(|q| evaluate_one(agent, retriever, q, limits, seed))
        .collect()
}

pub const INDEX_FILE: &str = "index.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO_FILE: &str = "config_echo.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `index`: builds a BM25 index from a corpus and writes `<out>/index.json`.
pub fn cmd_index(corpus: &Path, out_dir: &Path, params: IndexParams) -> Result<PathBuf> {
    params.validate().map_err(to_config)?;
    let corpus = load_corpus(corpus)?;
    let index = build_index(&corpus, params);
    create_dir(out_dir)?;
    let path = out_dir.join(INDEX_FILE);
    index.save(&path)?;
    log::info!("indexed {} documents, {} terms", index.num_docs(), index.num_terms());
    Ok(path)
}

/// `toy-data`: writes the bundled toy benchmark.
pub fn cmd_toy_data(out_dir: &Path) -> Result<()> {
    crate::toydata::generate(crate::toydata::ToySpec::default()).write(out_dir)
}

/// `build-dataset`: probes `raw_dataset` with the solve backend and writes
/// difficulty-balanced `train.jsonl` and `validation.jsonl`.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<labeling::BalancedDataset> {
    cfg.validate_paths()?;
    let raw_path = cfg
        .raw_dataset
        .as_ref()
        .ok_or_else(|| Error::Config("`raw_dataset` is not configured".into()))?;
    let raw = labeling::load_dataset(raw_path)?;
    let policy = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, &raw)?;
    let pool = cfg.pool()?;
    let built = pool.install(|| {
        labeling::build_balanced_dataset(
            &raw,
            &policy,
            &cfg.labeling,
            &cfg.limits,
            cfg.n_per_bucket,
            cfg.n_val_per_bucket,
            cfg.seed,
        )
    })?;
    create_dir(&cfg.output_dir)?;
    labeling::write_dataset(&cfg.output_dir.join("train.jsonl"), &built.train)?;
    labeling::write_dataset(&cfg.output_dir.join("validation.jsonl"), &built.validation)?;
    Ok(built)
}

/// `probe`: stage-2 pseudo-labels from the solve backend, written as
/// `labels.jsonl` plus the matching `sft.jsonl`.
pub fn cmd_probe(cfg: &RunConfig) -> Result<Vec<(QAInstance, Assessment)>> {
    cfg.validate_paths()?;
    let benchmarks = load_benchmarks(cfg)?;
    let questions = all_questions(&benchmarks);
    if questions.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let policy = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, &questions)?;
    let pool = cfg.pool()?;
    let labels = pool.install(|| labeling::make_decision_labels(&questions, &policy, &cfg.labeling, &cfg.limits, cfg.seed))?;
    create_dir(&cfg.output_dir)?;
    labeling::write_labels(&cfg.output_dir.join("labels.jsonl"), &labels)?;
    labeling::emit_sft_dataset(&cfg.output_dir.join("sft.jsonl"), &labels)?;
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
    E2e,
    /// Single-prompt training with the configured reward (shaping baselines).
    Baseline,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "one" => Ok(Stage::One),
            "2" | "two" => Ok(Stage::Two),
            "e2e" => Ok(Stage::E2e),
            "baseline" => Ok(Stage::Baseline),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected 1, 2, e2e or baseline)"))),
        }
    }
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::E2e => "e2e",
            Stage::Baseline => "baseline",
        }
    }
}

/// `train`: runs one training stage on the toy backend and writes
/// `<tag>.tsv` (checkpoint) and `train_<tag>.csv` (curves). Stage 2 trains
/// the decision backend on the label file; the other stages train the solve
/// backend on the configured datasets.
pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainOutcome> {
    cfg.validate_paths()?;
    let benchmarks = load_benchmarks(cfg)?;
    let questions = all_questions(&benchmarks);
    let pool = cfg.pool()?;
    create_dir(&cfg.output_dir)?;
    let tag = stage.tag();
    let (policy, outcome) = pool.install(|| -> Result<(PolicyHandle, TrainOutcome)> {
        match stage {
            Stage::Two => {
                let labels_path = cfg
                    .labels_path
                    .clone()
                    .unwrap_or_else(|| cfg.output_dir.join("labels.jsonl"));
                let labeled = labeling::read_labels(&labels_path)?;
                let qs: Vec<QAInstance> = labeled.iter().map(|(q, _)| q.clone()).collect();
                let mut policy = build_policy(require_backend(&cfg.decision_backend, "decision_backend")?, &qs)?;
                let (outcome, best) = train_stage2_selected(cfg, &mut policy, &labeled)?;
                Ok((best.unwrap_or(policy), outcome))
            }
            _ => {
                if questions.is_empty() {
                    return Err(Error::Config("no datasets configured".into()));
                }
                let retriever = build_retriever(cfg)?;
                let mut policy = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, &questions)?;
                let outcome = match stage {
                    Stage::One => grpo::train_stage1(&mut policy, retriever.as_ref(), &questions, &cfg.train, &cfg.limits)?,
                    Stage::E2e => grpo::train_e2e(
                        &mut policy,
                        retriever.as_ref(),
                        &questions,
                        &cfg.train,
                        &cfg.limits,
                        cfg.labeling.rho,
                    )?,
                    _ => grpo::train_single_prompt(
                        &mut policy,
                        retriever.as_ref(),
                        &questions,
                        &cfg.train,
                        &cfg.limits,
                        &cfg.reward,
                        cfg.baseline_prompt,
                    )?,
                };
                Ok((policy, outcome))
            }
        }
    })?;
    let toy = policy
        .as_toy()
        .ok_or_else(|| Error::UnsupportedBackend("training produced a non-toy policy".into()))?;
    toy.save(&cfg.output_dir.join(format!("{tag}.tsv")))?;
    grpo::write_training_csv(&cfg.output_dir.join(format!("train_{tag}.csv")), &outcome.log)?;
    if stage == Stage::E2e {
        let mut w = writer(&cfg.output_dir.join("e2e_labels.jsonl"))?;
        for l in &outcome.labels {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n").map_err(|e| Error::io("e2e_labels.jsonl", e))?;
        }
        w.flush().map_err(|e| Error::io("e2e_labels.jsonl", e))?;
    }
    Ok(outcome)
}

/// Stage-2 training with end-of-epoch checkpoint selection on the
/// validation set (maximizing EM × F1_aware) when one is configured.
fn train_stage2_selected(
    cfg: &RunConfig,
    policy: &mut PolicyHandle,
    labeled: &[(QAInstance, Assessment)],
) -> Result<(TrainOutcome, Option<PolicyHandle>)> {
    let Some(val_path) = &cfg.validation_path else {
        return Ok((grpo::train_stage2(policy, labeled, &cfg.train, &cfg.limits)?, None));
    };
    let mut validation = labeling::load_dataset(val_path)?;
    for q in &mut validation {
        q.benchmark = "validation".into();
    }
    let solve = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, &validation)?;
    let retriever = build_retriever(cfg)?;
    // the decision policy must also cover validation questions
    let toy = policy.toy_mut()?;
    let extra = ToySoftmaxPolicy::for_dataset(&validation);
    for key in extra.contexts().filter(|k| k.mode == PromptMode::Decision) {
        if toy.tokens(key).is_err() {
            let tokens = extra.tokens(key)?;
            let actions = tokens
                .iter()
                .map(|t| {
                    (
                        t.to_string(),
                        crate::policy::ToyAction::Emit(format!("<assessment>{t}</assessment>")),
                        0.0,
                    )
                })
                .collect();
            toy.insert_context(ContextKey::new(key.mode, key.question_id.clone()), actions);
        }
    }
    let mut scores = Vec::new();
    let mut snapshots = Vec::new();
    let outcome = grpo::train_stage2_with(policy, labeled, &cfg.train, &cfg.limits, |epoch, p| {
        let agent = Agent::TwoStage {
            decision: p.clone(),
            solve: solve.clone(),
        };
        let results: Vec<InstanceResult> = evaluate_benchmark(&agent, retriever.as_ref(), &validation, &cfg.limits, cfg.seed)?
            .into_iter()
            .map(|e| e.result)
            .collect();
        let report = metrics::aggregate_report(&results, serde_json::Value::Null, cfg.rate_per_1000)?;
        log::info!(
            "epoch {epoch}: validation EM {:.4}, F1_aware {:.4}",
            report.macro_em,
            report.macro_f1_aware
        );
        scores.push((report.macro_em, report.macro_f1_aware));
        snapshots.push(p.clone());
        Ok(())
    })?;
    let best = grpo::select_checkpoint(&scores).map(|i| snapshots.swap_remove(i));
    Ok((outcome, best))
}

fn build_agent(cfg: &RunConfig, questions: &[QAInstance]) -> Result<Agent> {
    let solve = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, questions)?;
    Ok(match cfg.agent {
        AgentKind::TwoStage => Agent::TwoStage {
            decision: build_policy(require_backend(&cfg.decision_backend, "decision_backend")?, questions)?,
            solve,
        },
        AgentKind::Single => Agent::Single {
            policy: solve,
            system: cfg.baseline_prompt,
        },
    })
}

/// `infer`: two-stage inference on every configured question (or on the
/// single question given), writing `inferences.jsonl`.
pub fn cmd_infer(cfg: &RunConfig, question: Option<&str>) -> Result<Vec<InferenceResult>> {
    cfg.validate_paths()?;
    let questions = match question {
        Some(text) => vec![QAInstance::new(
            "cli-0",
            text,
            crate::textproto::GoldAnswers::new(["?"]).expect("non-empty"),
            "cli",
        )],
        None => all_questions(&load_benchmarks(cfg)?),
    };
    if questions.is_empty() {
        return Err(Error::Config("no questions: configure datasets or pass a question".into()));
    }
    let decision = build_policy(require_backend(&cfg.decision_backend, "decision_backend")?, &questions)?;
    let solve = build_policy(require_backend(&cfg.solve_backend, "solve_backend")?, &questions)?;
    let retriever = build_retriever(cfg)?;
    let pool = cfg.pool()?;
    let results: Vec<InferenceResult> = pool.install(|| {
        questions
            .par_iter()
            .map(|q| {
                two_stage_infer(
                    &decision,
                    &solve,
                    retriever.as_ref(),
                    q,
                    &cfg.limits,
                    derive_seed(cfg.seed, &q.id, 0),
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("inferences.jsonl");
    let mut w = writer(&path)?;
    for r in &results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

/// `evaluate`: greedy evaluation of the configured agent on every
/// benchmark. Writes `results.jsonl`, `trajectories.jsonl`,
/// `config_echo.json` and `report.json` into the output directory.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Report> {
    cfg.validate_paths()?;
    let benchmarks = load_benchmarks(cfg)?;
    let questions = all_questions(&benchmarks);
    if questions.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let agent = build_agent(cfg, &questions)?;
    let retriever = build_retriever(cfg)?;
    let pool = cfg.pool()?;
    let evaluated = pool.install(|| evaluate_benchmark(&agent, retriever.as_ref(), &questions, &cfg.limits, cfg.seed))?;

    create_dir(&cfg.output_dir)?;
    let traj_path = cfg.output_dir.join(TRAJECTORY_FILE);
    let mut log = TrajectoryLog::new(writer(&traj_path)?);
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    let mut results_out = writer(&results_path)?;
    let by_id: BTreeMap<&str, &QAInstance> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut results = Vec::with_capacity(evaluated.len());
    for e in evaluated {
        let q = by_id[e.result.question_id.as_str()];
        for (stage, t) in &e.trajectories {
            log.append(stage, q, &cfg.limits, &GenParams::greedy(t.seed), t)?;
        }
        serde_json::to_writer(&mut results_out, &e.result)?;
        results_out.write_all(b"\n").map_err(|e| Error::io(&results_path, e))?;
        results.push(e.result);
    }
    log.into_inner().flush().map_err(|e| Error::io(&traj_path, e))?;
    results_out.flush().map_err(|e| Error::io(&results_path, e))?;

    let echo = cfg.echo();
    write_json_pretty(&cfg.output_dir.join(CONFIG_ECHO_FILE), &echo)?;
    let report = metrics::aggregate_report(&results, echo, cfg.rate_per_1000)?;
    write_json_pretty(&cfg.output_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// `report`: re-aggregates `results.jsonl` (and `config_echo.json`, if
/// present) from a results directory.
pub fn cmd_report(in_dir: &Path, out: &Path, rate_per_1000: f64) -> Result<Report> {
    let results_path = in_dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&results_path).map_err(|e| Error::io(&results_path, e))?;
    let mut results = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str::<InstanceResult>(line).map_err(|e| Error::Parse {
            path: results_path.clone(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    let echo_path = in_dir.join(CONFIG_ECHO_FILE);
    let echo = if echo_path.exists() {
        let bytes = std::fs::read(&echo_path).map_err(|e| Error::io(&echo_path, e))?;
        serde_json::from_slice(&bytes)?
    } else {
        serde_json::Value::Null
    };
    let report = metrics::aggregate_report(&results, echo, rate_per_1000)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json_pretty(out, &report)?;
    Ok(report)
}
