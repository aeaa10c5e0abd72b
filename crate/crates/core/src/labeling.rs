//! Solve-rate probing, difficulty-balanced datasets and decision labels.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EmptyRetriever;
use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::policy::{GenParams, PolicyHandle, PromptMode};
use crate::prompts::{user_message, PromptKey};
use crate::rollout::{run_group_with, RolloutLimits};
use crate::seed::{self, SeedMixer};
use crate::textproto::{extract_tag, verify, Assessment, GoldAnswers, Tag, VerifierKind};

/// Default training questions per difficulty bucket.
pub const DEFAULT_TRAIN_PER_BUCKET: usize = 4096;
/// Default validation questions per difficulty bucket (2048 in total).
pub const DEFAULT_VALIDATION_PER_BUCKET: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    #[serde(rename = "golden_answers")]
    pub golds: GoldAnswers,
    #[serde(default)]
    pub benchmark: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Assessment>,
}

impl QAInstance {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        golds: GoldAnswers,
        benchmark: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            golds,
            benchmark: benchmark.into(),
            solve_rate: None,
            label: None,
        }
    }
}

/// Reads a JSONL dataset. Rejects malformed lines, empty ids or questions,
/// out-of-range solve rates and duplicate ids, reporting the line number.
pub fn load_dataset(path: &Path) -> Result<Vec<QAInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let q: QAInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if q.id.trim().is_empty() || q.question.trim().is_empty() {
            return Err(parse_err("id and question must be non-empty".into()));
        }
        if let Some(p) = q.solve_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(parse_err(format!("solve_rate {p} is outside [0,1]")));
            }
        }
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: q.id,
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, dataset: &[QAInstance]) -> Result<()> {
    write_jsonl(path, dataset)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    #[serde(rename = "k")]
    pub k: usize,
    pub rho: f64,
    pub verifier: VerifierKind,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 0.5,
            verifier: VerifierKind::SubEm,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Validation(format!("rho must be in [0,1], got {}", self.rho)));
        }
        Ok(())
    }

    pub fn label_for(&self, solve_rate: f64) -> Assessment {
        Assessment::from_bool(solve_rate >= self.rho)
    }
}

/// Which system prompt probes use: the dedicated probe prompt for dataset
/// construction, or the parametric-only solving prompt for stage-2 labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbePrompt {
    Probe,
    Param,
}

impl ProbePrompt {
    pub fn key(self) -> PromptKey {
        match self {
            ProbePrompt::Probe => PromptKey::Probe,
            ProbePrompt::Param => PromptKey::Param,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub solve_rate: f64,
    pub solved: usize,
    /// Samples lost to backend failures; counted as unsolved.
    pub failures: usize,
}

fn probe_seed(seed: u64, question_id: &str) -> u64 {
    SeedMixer::new(seed).str("probe").str(question_id).finish()
}

/// Samples `cfg.k` parametric-only trajectories and returns the fraction
/// verified correct. Fails only if every sample hit a backend failure.
pub fn probe_solve_rate(
    policy: &PolicyHandle,
    question: &QAInstance,
    cfg: &LabelingConfig,
    prompt: ProbePrompt,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let params = GenParams::rollout(probe_seed(seed, &question.id));
    let group = run_group_with(
        policy,
        &EmptyRetriever,
        question,
        PromptMode::Param,
        prompt.key(),
        cfg.k,
        limits,
        &params,
    )?;
    let failures = group.iter().filter(|t| t.is_backend_failure()).count();
    if failures == cfg.k {
        let last = group
            .iter()
            .rev()
            .find_map(|t| t.backend_error.clone())
            .unwrap_or_default();
        return Err(BackendError {
            endpoint: format!("probe of question {}", question.id),
            kind: BackendErrorKind::Transport(last),
            attempts: cfg.k as u32,
        }
        .into());
    }
    if failures > 0 {
        log::warn!("question {}: {failures} of {} probe samples failed", question.id, cfg.k);
    }
    let solved = group
        .iter()
        .filter(|t| {
            t.final_answer
                .as_deref()
                .is_some_and(|a| verify(cfg.verifier, a, &question.golds))
        })
        .count();
    Ok(ProbeResult {
        solve_rate: solved as f64 / cfg.k as f64,
        solved,
        failures,
    })
}

fn probe_all(
    dataset: &[QAInstance],
    policy: &PolicyHandle,
    cfg: &LabelingConfig,
    prompt: ProbePrompt,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    dataset
        .par_iter()
        .map(|q| probe_solve_rate(policy, q, cfg, prompt, limits, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedDataset {
    pub train: Vec<QAInstance>,
    pub validation: Vec<QAInstance>,
    pub easy_available: usize,
    pub hard_available: usize,
}

/// Probes every instance with the probe prompt, splits at `cfg.rho` into
/// easy (`p >= rho`) and hard, and draws `n_per_bucket` training and
/// `n_val_per_bucket` validation instances from each bucket without
/// overlap. Every emitted instance carries its solve rate.
#[allow(clippy::too_many_arguments)]
pub fn build_balanced_dataset(
    raw: &[QAInstance],
    policy: &PolicyHandle,
    cfg: &LabelingConfig,
    limits: &RolloutLimits,
    n_per_bucket: usize,
    n_val_per_bucket: usize,
    seed: u64,
) -> Result<BalancedDataset> {
    let probes = probe_all(raw, policy, cfg, ProbePrompt::Probe, limits, seed)?;
    let (mut easy, mut hard): (Vec<QAInstance>, Vec<QAInstance>) = raw
        .iter()
        .zip(&probes)
        .map(|(q, p)| QAInstance {
            solve_rate: Some(p.solve_rate),
            ..q.clone()
        })
        .partition(|q| q.solve_rate.unwrap_or(0.0) >= cfg.rho);
    let need = n_per_bucket + n_val_per_bucket;
    let (easy_available, hard_available) = (easy.len(), hard.len());
    if easy.len() < need || hard.len() < need {
        let mut short = Vec::new();
        if easy.len() < need {
            short.push(format!("easy bucket has {} of {need}", easy.len()));
        }
        if hard.len() < need {
            short.push(format!("hard bucket has {} of {need}", hard.len()));
        }
        return Err(Error::InsufficientData(short.join("; ")));
    }
    let mut rng = seed::rng(SeedMixer::new(seed).str("balance").finish());
    easy.shuffle(&mut rng);
    hard.shuffle(&mut rng);
    let mut train: Vec<QAInstance> = easy[..n_per_bucket]
        .iter()
        .chain(&hard[..n_per_bucket])
        .cloned()
        .collect();
    let mut validation: Vec<QAInstance> = easy[n_per_bucket..need]
        .iter()
        .chain(&hard[n_per_bucket..need])
        .cloned()
        .collect();
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok(BalancedDataset {
        train,
        validation,
        easy_available,
        hard_available,
    })
}

/// Stage-2 pseudo-labels: `yes` iff the parametric-only solve rate under
/// `stage1_policy` reaches `cfg.rho`. Returned instances carry both the
/// solve rate and the label.
pub fn make_decision_labels(
    dataset: &[QAInstance],
    stage1_policy: &PolicyHandle,
    cfg: &LabelingConfig,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<Vec<(QAInstance, Assessment)>> {
    let probes = probe_all(dataset, stage1_policy, cfg, ProbePrompt::Param, limits, seed)?;
    Ok(dataset
        .iter()
        .zip(probes)
        .map(|(q, p)| {
            let label = cfg.label_for(p.solve_rate);
            let q = QAInstance {
                solve_rate: Some(p.solve_rate),
                label: Some(label),
                ..q.clone()
            };
            (q, label)
        })
        .collect())
}

/// Writes a label file: the dataset format with `label` filled in.
pub fn write_labels(path: &Path, labels: &[(QAInstance, Assessment)]) -> Result<()> {
    let records: Vec<QAInstance> = labels
        .iter()
        .map(|(q, l)| QAInstance {
            label: Some(*l),
            ..q.clone()
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_labels(path: &Path) -> Result<Vec<(QAInstance, Assessment)>> {
    load_dataset(path)?
        .into_iter()
        .map(|q| match q.label {
            Some(l) => Ok((q, l)),
            None => Err(Error::Config(format!(
                "{}: question `{}` has no label",
                path.display(),
                q.id
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub system: String,
    pub user: String,
    pub target: String,
}

impl SftRecord {
    pub fn new(question: &QAInstance, label: Assessment) -> Self {
        Self {
            system: PromptKey::Decision.text().to_string(),
            user: user_message(&question.question),
            target: label.render(),
        }
    }

    pub fn label(&self) -> Option<Assessment> {
        extract_tag(&self.target, Tag::Assessment).and_then(|t| Assessment::parse(&t))
    }
}

/// Supervised targets for the decision prompt.
pub fn emit_sft_dataset(path: &Path, labels: &[(QAInstance, Assessment)]) -> Result<()> {
    let records: Vec<SftRecord> = labels.iter().map(|(q, l)| SftRecord::new(q, *l)).collect();
    write_jsonl(path, &records)
}

pub fn read_sft_dataset(path: &Path) -> Result<Vec<SftRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ScriptedPolicy, ScriptedProfile};
    use crate::seed::derive_seed;

    fn qa(id: &str, gold: &str) -> QAInstance {
        QAInstance::new(id, format!("question {id}?"), GoldAnswers::new([gold]).unwrap(), "toy")
    }

    fn profile_policy(qs: &[(QAInstance, f64)]) -> PolicyHandle {
        let mut p = ScriptedPolicy::new();
        for (q, solve) in qs {
            p = p.with_profile(
                &q.id,
                ScriptedProfile::new(q.golds.first(), "wrong").with_param_solve(*solve),
            );
        }
        PolicyHandle::scripted(p)
    }

    #[test]
    fn always_and_never() {
        let q = qa("q", "Paris");
        let cfg = LabelingConfig::default();
        let limits = RolloutLimits::default();
        let always = profile_policy(&[(q.clone(), 1.0)]);
        let never = profile_policy(&[(q.clone(), 0.0)]);
        assert_eq!(probe_solve_rate(&always, &q, &cfg, ProbePrompt::Probe, &limits, 1).unwrap().solve_rate, 1.0);
        assert_eq!(probe_solve_rate(&never, &q, &cfg, ProbePrompt::Probe, &limits, 1).unwrap().solve_rate, 0.0);
    }

    #[test]
    fn counts_fixture_hits() {
        let q = qa("q", "Paris");
        let seed = 11;
        let base = probe_seed(seed, &q.id);
        let mut sp = ScriptedPolicy::new().with_fixture(PromptMode::Param, "q", 0, "<answer>Lyon</answer>");
        for i in [0u64, 3, 7] {
            sp = sp.with_seeded_fixture(PromptMode::Param, "q", 0, derive_seed(base, "q", i), "<answer>Paris</answer>");
        }
        let r = probe_solve_rate(
            &PolicyHandle::scripted(sp),
            &q,
            &LabelingConfig::default(),
            ProbePrompt::Param,
            &RolloutLimits::default(),
            seed,
        )
        .unwrap();
        assert_eq!(r.solved, 3);
        assert!((r.solve_rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn balanced_dataset() {
        let mut qs = Vec::new();
        for i in 0..100 {
            qs.push((qa(&format!("e{i}"), &format!("gold e{i}")), 1.0));
            qs.push((qa(&format!("h{i}"), &format!("gold h{i}")), 0.0));
        }
        let policy = profile_policy(&qs);
        let raw: Vec<QAInstance> = qs.iter().map(|(q, _)| q.clone()).collect();
        let cfg = LabelingConfig::default();
        let limits = RolloutLimits::default();
        let d = build_balanced_dataset(&raw, &policy, &cfg, &limits, 40, 10, 3).unwrap();
        assert_eq!(d.train.len(), 80);
        assert_eq!(d.validation.len(), 20);
        let easy = d.train.iter().filter(|q| q.solve_rate == Some(1.0)).count();
        assert_eq!(easy, 40);
        let train_ids: HashSet<_> = d.train.iter().map(|q| &q.id).collect();
        assert!(d.validation.iter().all(|q| !train_ids.contains(&q.id)));
        assert_eq!(d, build_balanced_dataset(&raw, &policy, &cfg, &limits, 40, 10, 3).unwrap());

        let full = build_balanced_dataset(&raw, &policy, &cfg, &limits, 50, 0, 3).unwrap();
        assert_eq!(full.train.len(), 100);

        let only_easy: Vec<_> = qs.iter().filter(|(_, s)| *s == 1.0).cloned().collect();
        let raw_easy: Vec<_> = only_easy.iter().map(|(q, _)| q.clone()).collect();
        let err = build_balanced_dataset(&raw_easy, &profile_policy(&only_easy), &cfg, &limits, 10, 0, 3).unwrap_err();
        assert!(err.to_string().contains("hard bucket has 0"), "{err}");
    }

    #[test]
    fn labels_boundary_and_determinism() {
        let cfg = LabelingConfig::default();
        assert_eq!(cfg.label_for(0.5), Assessment::Yes);
        assert_eq!(cfg.label_for(0.49), Assessment::No);

        let qs: Vec<(QAInstance, f64)> = (0..20)
            .map(|i| (qa(&format!("q{i}"), &format!("g{i}")), if i % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        let policy = profile_policy(&qs);
        let ds: Vec<QAInstance> = qs.iter().map(|(q, _)| q.clone()).collect();
        let limits = RolloutLimits::default();
        let k10 = make_decision_labels(&ds, &policy, &cfg, &limits, 1).unwrap();
        let k1 = make_decision_labels(&ds, &policy, &LabelingConfig { k: 1, ..cfg }, &limits, 1).unwrap();
        let l10: Vec<_> = k10.iter().map(|(_, l)| *l).collect();
        let l1: Vec<_> = k1.iter().map(|(_, l)| *l).collect();
        assert_eq!(l10, l1);
        assert_eq!(l10[0], Assessment::Yes);
        assert_eq!(l10[1], Assessment::No);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![(qa("a", "x"), Assessment::Yes), (qa("b", "y"), Assessment::No)];

        let sft = dir.path().join("sft.jsonl");
        emit_sft_dataset(&sft, &labels).unwrap();
        let back = read_sft_dataset(&sft).unwrap();
        assert_eq!(back[0].target, "<assessment>yes</assessment>");
        assert_eq!(back[0].user, "Question: question a?");
        let parsed: Vec<_> = back.iter().map(|r| r.label().unwrap()).collect();
        assert_eq!(parsed, vec![Assessment::Yes, Assessment::No]);

        let empty = dir.path().join("empty.jsonl");
        emit_sft_dataset(&empty, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), "");

        let lf = dir.path().join("labels.jsonl");
        write_labels(&lf, &labels).unwrap();
        let back = read_labels(&lf).unwrap();
        assert_eq!(back.iter().map(|(_, l)| *l).collect::<Vec<_>>(), vec![Assessment::Yes, Assessment::No]);
    }

    #[test]
    fn dataset_loading_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"question\":\"q?\",\"golden_answers\":[\"x\"],\"benchmark\":\"t\"}\n\
             {\"id\":\"a\",\"question\":\"q?\",\"golden_answers\":[\"x\"],\"benchmark\":\"t\"}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::DuplicateId { line: 2, .. })));
        std::fs::write(&p, "{\"id\":\"a\",\"question\":\"q?\",\"golden_answers\":[]}\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"question\":\"q?\",\"golden_answers\":[\"x\"],\"solve_rate\":1.5}\n",
        )
        .unwrap();
        assert!(load_dataset(&p).is_err());
    }
}
