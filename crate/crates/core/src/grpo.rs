//! Group-relative policy optimization for the toy policy.
//!
//! Rewards are normalized within each group of rollouts for the same input
//! and prompt mode. The update ascends the clipped surrogate minus a
//! closed-form KL penalty toward a frozen reference, summed over every
//! sampled action of every trajectory. Rollouts are collected from a
//! snapshot of the live policy and exactly one update is taken per
//! collection, so the importance ratio is 1 when the gradient is computed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmptyRetriever, Retriever};
use crate::error::{Error, Result};
use crate::labeling::QAInstance;
use crate::policy::{context_for, is_retrieval, GenParams, PolicyHandle, PromptMode, ThetaGrad, ToySoftmaxPolicy};
use crate::prompts::PromptKey;
use crate::rewards::{MinCallsTracker, RewardContext, RewardSpec};
use crate::rollout::{run_group_with, run_trajectory, summarize, RolloutLimits, Trajectory};
use crate::seed::{self, SeedMixer};
use crate::textproto::{verify, Assessment, VerifierKind};

/// `(r_i − mean) / (std + eps)` with the population standard deviation;
/// all zeros when `std < eps`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub question_id: String,
    pub mode: PromptMode,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(question_id: &str, mode: PromptMode, trajectories: Vec<Trajectory>, rewards: Vec<f64>, eps: f64) -> Result<Self> {
        if trajectories.len() != rewards.len() || trajectories.is_empty() {
            return Err(Error::Validation(format!(
                "group {question_id}: {} trajectories but {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        let advantages = group_advantages(&rewards, eps);
        Ok(Self {
            question_id: question_id.to_string(),
            mode,
            trajectories,
            rewards,
            advantages,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size_search: usize,
    pub group_size_param: usize,
    pub group_size_decision: usize,
    pub clip_ratio: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Questions per update; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    pub adv_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size_search: 5,
            group_size_param: 10,
            group_size_decision: 5,
            clip_ratio: 0.2,
            kl_beta: 0.001,
            learning_rate: 0.5,
            epochs: 20,
            batch_size: None,
            adv_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.group_size_search == 0 || self.group_size_param == 0 || self.group_size_decision == 0 {
            return bad("group sizes must be at least 1".into());
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad(format!("clip_ratio must be in (0,1), got {}", self.clip_ratio));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("kl_beta must be non-negative, got {}", self.kl_beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.adv_epsilon.is_nan() || self.adv_epsilon <= 0.0 {
            return bad("adv_epsilon must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn group_size(&self, mode: PromptMode) -> usize {
        match mode {
            PromptMode::Param => self.group_size_param,
            PromptMode::Search => self.group_size_search,
            PromptMode::Decision => self.group_size_decision,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    /// Mean closed-form KL to the reference over the action terms, before
    /// the update.
    pub kl: f64,
    pub clip_fraction: f64,
    pub per_mode: BTreeMap<PromptMode, ModeStats>,
}

#[derive(Default)]
struct Acc {
    reward_sum: f64,
    trajectories: usize,
    kl_sum: f64,
    terms: usize,
    clipped: usize,
}

impl Acc {
    fn stats(&self) -> ModeStats {
        let div = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        ModeStats {
            mean_reward: div(self.reward_sum, self.trajectories),
            kl: div(self.kl_sum, self.terms),
            clip_fraction: div(self.clipped as f64, self.terms),
        }
    }

    fn add(&mut self, other: &Acc) {
        self.reward_sum += other.reward_sum;
        self.trajectories += other.trajectories;
        self.kl_sum += other.kl_sum;
        self.terms += other.terms;
        self.clipped += other.clipped;
    }
}

fn add_scaled(into: &mut ThetaGrad, g: &ThetaGrad, scale: f64) {
    for (k, v) in g {
        *into.entry(k.clone()).or_insert(0.0) += scale * v;
    }
}

/// One gradient-ascent step on
/// `Σ_groups Σ_i Σ_t [min(ρ·A_i, clip(ρ, 1−ε, 1+ε)·A_i) − β·KL(π_θ ‖ π_ref)]`
/// where `t` ranges over the sampled actions of trajectory `i` and
/// `ρ = π_θ(a_t) / π_old(a_t)` with `π_old` the sampling policy.
pub fn grpo_step(
    policy: &mut ToySoftmaxPolicy,
    reference: &ToySoftmaxPolicy,
    groups: &[Group],
    cfg: &TrainConfig,
) -> Result<UpdateStats> {
    let eps = cfg.clip_ratio;
    let mut grad = ThetaGrad::new();
    let mut per_mode: BTreeMap<PromptMode, Acc> = BTreeMap::new();
    for group in groups {
        let acc = per_mode.entry(group.mode).or_default();
        for ((traj, reward), adv) in group.trajectories.iter().zip(&group.rewards).zip(&group.advantages) {
            acc.reward_sum += reward;
            acc.trajectories += 1;
            if traj.is_backend_failure() {
                continue;
            }
            let mut retrieved = false;
            for turn in &traj.turns {
                let key = context_for(group.mode, &group.question_id, retrieved);
                retrieved |= turn.environment_response.as_deref().is_some_and(is_retrieval);
                let (Some(token), Some(old_lp)) = (&turn.action_token, turn.behavior_logprob) else {
                    return Err(Error::UnsupportedBackend(format!(
                        "trajectory for {} has no action tokens; GRPO needs rollouts from the toy policy",
                        traj.question_id
                    )));
                };
                let (lp, dlogp) = policy.action_logprob_and_grad(&key, token)?;
                let ratio = (lp - old_lp).exp();
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                acc.terms += 1;
                if clipped < unclipped {
                    acc.clipped += 1;
                } else {
                    add_scaled(&mut grad, &dlogp, adv * ratio);
                }
                acc.kl_sum += policy.kl(reference, &key)?;
                if cfg.kl_beta > 0.0 {
                    add_scaled(&mut grad, &policy.kl_grad(reference, &key)?, -cfg.kl_beta);
                }
            }
        }
    }
    let mut total = Acc::default();
    for acc in per_mode.values() {
        total.add(acc);
    }
    policy.apply_update(&grad, cfg.learning_rate)?;
    let overall = total.stats();
    Ok(UpdateStats {
        mean_reward: overall.mean_reward,
        kl: overall.kl,
        clip_fraction: overall.clip_fraction,
        per_mode: per_mode.into_iter().map(|(m, a)| (m, a.stats())).collect(),
    })
}

/// One row of the training CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mode: PromptMode,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub label_accuracy: Option<f64>,
}

/// An on-the-fly decision label produced during end-to-end training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub step: usize,
    pub question_id: String,
    pub solve_rate: f64,
    pub label: Assessment,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub stats: Vec<UpdateStats>,
    pub labels: Vec<LabelEvent>,
    pub final_label_accuracy: Option<f64>,
}

impl TrainOutcome {
    fn record(&mut self, step: usize, stats: UpdateStats, label_accuracy: Option<f64>) {
        for (mode, s) in &stats.per_mode {
            self.log.push(StepLog {
                step,
                mode: *mode,
                mean_reward: s.mean_reward,
                kl: s.kl,
                clip_fraction: s.clip_fraction,
                label_accuracy: if *mode == PromptMode::Decision { label_accuracy } else { None },
            });
        }
        self.stats.push(stats);
    }

    /// Mean reward of `mode` at each step.
    pub fn reward_curve(&self, mode: PromptMode) -> Vec<f64> {
        self.log.iter().filter(|l| l.mode == mode).map(|l| l.mean_reward).collect()
    }
}

pub fn write_training_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,mode,mean_reward,kl,clip_fraction,label_accuracy\n");
    for l in log {
        let acc = l.label_accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.step, l.mode, l.mean_reward, l.kl, l.clip_fraction, acc
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn require_toy(policy: &PolicyHandle) -> Result<ToySoftmaxPolicy> {
    policy.as_toy().map(ToySoftmaxPolicy::snapshot_reference).ok_or_else(|| {
        Error::UnsupportedBackend(format!(
            "training requires the toy backend, got `{}`",
            policy.backend_name()
        ))
    })
}

/// Shuffled batches for every epoch, as index lists into the dataset.
fn batches(n: usize, cfg: &TrainConfig, stage: &str) -> Vec<Vec<usize>> {
    let size = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(SeedMixer::new(cfg.seed).str(stage).str("epoch").int(epoch as u64).finish());
        idx.shuffle(&mut rng);
        out.extend(idx.chunks(size).map(<[usize]>::to_vec));
    }
    out
}

fn rollout_params(cfg: &TrainConfig, stage: &str, step: usize, mode: PromptMode) -> GenParams {
    GenParams::rollout(
        SeedMixer::new(cfg.seed)
            .str(stage)
            .int(step as u64)
            .str(mode.as_str())
            .finish(),
    )
}

fn take_step(
    policy: &mut PolicyHandle,
    reference: &ToySoftmaxPolicy,
    groups: &[Group],
    cfg: &TrainConfig,
) -> Result<UpdateStats> {
    grpo_step(policy.toy_mut()?, reference, groups, cfg)
}

fn outcome_group(
    question: &QAInstance,
    mode: PromptMode,
    trajectories: Vec<Trajectory>,
    cfg: &TrainConfig,
) -> Result<Group> {
    let rewards = trajectories
        .iter()
        .map(|t| if summarize(t, &question.golds).em { 1.0 } else { 0.0 })
        .collect();
    Group::new(&question.id, mode, trajectories, rewards, cfg.adv_epsilon)
}

/// Stage 1: for every question in a batch, a search-mode group and a
/// param-mode group scored by the outcome reward, advantages computed per
/// group, one update per batch.
pub fn train_stage1(
    policy: &mut PolicyHandle,
    retriever: &dyn Retriever,
    dataset: &[QAInstance],
    cfg: &TrainConfig,
    limits: &RolloutLimits,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("stage-1 training needs a non-empty dataset".into()));
    }
    let reference = require_toy(policy)?;
    let mut outcome = TrainOutcome::default();
    for (step, batch) in batches(dataset.len(), cfg, "stage1").into_iter().enumerate() {
        let behavior = policy.clone();
        let mut groups = Vec::new();
        for mode in [PromptMode::Search, PromptMode::Param] {
            let params = rollout_params(cfg, "stage1", step, mode);
            for &i in &batch {
                let q = &dataset[i];
                let trajs = crate::rollout::run_group(&behavior, retriever, q, mode, cfg.group_size(mode), limits, &params)?;
                groups.push(outcome_group(q, mode, trajs, cfg)?);
            }
        }
        drop(behavior);
        let stats = take_step(policy, &reference, &groups, cfg)?;
        outcome.record(step, stats, None);
    }
    Ok(outcome)
}

/// Fraction of questions whose greedy decision matches the label.
pub fn label_accuracy(
    policy: &PolicyHandle,
    labeled: &[(QAInstance, Assessment)],
    limits: &RolloutLimits,
) -> Result<f64> {
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (q, label) in labeled {
        let t = run_trajectory(policy, &EmptyRetriever, q, PromptMode::Decision, limits, &GenParams::greedy(0))?;
        if t.assessment == Some(*label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}

fn decision_group(question: &QAInstance, label: Assessment, trajectories: Vec<Trajectory>, cfg: &TrainConfig) -> Result<Group> {
    let rewards = trajectories
        .iter()
        .map(|t| if t.assessment == Some(label) { 1.0 } else { 0.0 })
        .collect();
    Group::new(&question.id, PromptMode::Decision, trajectories, rewards, cfg.adv_epsilon)
}

/// Stage 2: decision-mode groups rewarded 1 when the assessment equals the
/// pseudo-label. Label accuracy under greedy decoding is logged after every
/// update.
pub fn train_stage2(
    policy: &mut PolicyHandle,
    labeled: &[(QAInstance, Assessment)],
    cfg: &TrainConfig,
    limits: &RolloutLimits,
) -> Result<TrainOutcome> {
    train_stage2_with(policy, labeled, cfg, limits, |_, _| Ok(()))
}

/// As [`train_stage2`], calling `on_epoch(epoch, policy)` after the last
/// update of every epoch (for checkpointing).
pub fn train_stage2_with(
    policy: &mut PolicyHandle,
    labeled: &[(QAInstance, Assessment)],
    cfg: &TrainConfig,
    limits: &RolloutLimits,
    mut on_epoch: impl FnMut(usize, &PolicyHandle) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("stage-2 training needs labeled questions".into()));
    }
    let reference = require_toy(policy)?;
    let mut outcome = TrainOutcome::default();
    let all = batches(labeled.len(), cfg, "stage2");
    let per_epoch = all.len() / cfg.epochs.max(1);
    for (step, batch) in all.into_iter().enumerate() {
        let behavior = policy.clone();
        let params = rollout_params(cfg, "stage2", step, PromptMode::Decision);
        let mut groups = Vec::new();
        for &i in &batch {
            let (q, label) = &labeled[i];
            let trajs = crate::rollout::run_group(
                &behavior,
                &EmptyRetriever,
                q,
                PromptMode::Decision,
                cfg.group_size_decision,
                limits,
                &params,
            )?;
            groups.push(decision_group(q, *label, trajs, cfg)?);
        }
        drop(behavior);
        let stats = take_step(policy, &reference, &groups, cfg)?;
        let acc = label_accuracy(policy, labeled, limits)?;
        outcome.record(step, stats, Some(acc));
        outcome.final_label_accuracy = Some(acc);
        if per_epoch > 0 && (step + 1) % per_epoch == 0 {
            on_epoch((step + 1) / per_epoch - 1, policy)?;
        }
    }
    Ok(outcome)
}

/// End-to-end variant: per question, param, search and decision groups are
/// rolled together; the param group's SubEM solve rate labels the decision
/// group (`yes` iff `p >= rho`) and all groups share one update.
pub fn train_e2e(
    policy: &mut PolicyHandle,
    retriever: &dyn Retriever,
    dataset: &[QAInstance],
    cfg: &TrainConfig,
    limits: &RolloutLimits,
    rho: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("end-to-end training needs a non-empty dataset".into()));
    }
    let reference = require_toy(policy)?;
    let mut outcome = TrainOutcome::default();
    for (step, batch) in batches(dataset.len(), cfg, "e2e").into_iter().enumerate() {
        let behavior = policy.clone();
        let mut groups = Vec::new();
        let mut step_labels = Vec::new();
        for &i in &batch {
            let q = &dataset[i];
            let param = crate::rollout::run_group(
                &behavior,
                retriever,
                q,
                PromptMode::Param,
                cfg.group_size_param,
                limits,
                &rollout_params(cfg, "e2e", step, PromptMode::Param),
            )?;
            let solved = param
                .iter()
                .filter(|t| t.final_answer.as_deref().is_some_and(|a| verify(VerifierKind::SubEm, a, &q.golds)))
                .count();
            let p = solved as f64 / param.len() as f64;
            let label = Assessment::from_bool(p >= rho);
            step_labels.push((q.id.clone(), p, label));
            groups.push(outcome_group(q, PromptMode::Param, param, cfg)?);

            let search = crate::rollout::run_group(
                &behavior,
                retriever,
                q,
                PromptMode::Search,
                cfg.group_size_search,
                limits,
                &rollout_params(cfg, "e2e", step, PromptMode::Search),
            )?;
            groups.push(outcome_group(q, PromptMode::Search, search, cfg)?);

            let decision = crate::rollout::run_group(
                &behavior,
                retriever,
                q,
                PromptMode::Decision,
                cfg.group_size_decision,
                limits,
                &rollout_params(cfg, "e2e", step, PromptMode::Decision),
            )?;
            groups.push(decision_group(q, label, decision, cfg)?);
        }
        drop(behavior);
        let stats = take_step(policy, &reference, &groups, cfg)?;
        let correct = stats.per_mode.get(&PromptMode::Decision).map(|s| s.mean_reward);
        outcome.record(step, stats, correct);
        outcome.labels.extend(step_labels.into_iter().map(|(question_id, solve_rate, label)| LabelEvent {
            step,
            question_id,
            solve_rate,
            label,
        }));
    }
    Ok(outcome)
}

/// Trains a single search-capable prompt with a shaped reward, as the
/// reward-shaping baselines do. `system` is usually the search or shaping
/// prompt. Awareness shaping reads each question's frozen `solve_rate`;
/// OTC keeps a running minimum of search calls over correct trajectories.
pub fn train_single_prompt(
    policy: &mut PolicyHandle,
    retriever: &dyn Retriever,
    dataset: &[QAInstance],
    cfg: &TrainConfig,
    limits: &RolloutLimits,
    reward: &RewardSpec,
    system: PromptKey,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    reward.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    if reward.needs_solve_rate() {
        if let Some(q) = dataset.iter().find(|q| q.solve_rate.is_none()) {
            return Err(Error::Config(format!(
                "reward `{}` needs a solve rate on every question; `{}` has none",
                reward.name(),
                q.id
            )));
        }
    }
    let reference = require_toy(policy)?;
    let mut tracker = MinCallsTracker::new();
    let mut outcome = TrainOutcome::default();
    let mode = PromptMode::Search;
    for (step, batch) in batches(dataset.len(), cfg, "single").into_iter().enumerate() {
        let behavior = policy.clone();
        let params = rollout_params(cfg, "single", step, mode);
        let mut groups = Vec::new();
        for &i in &batch {
            let q = &dataset[i];
            let trajs = run_group_with(&behavior, retriever, q, mode, system, cfg.group_size_search, limits, &params)?;
            let summaries: Vec<_> = trajs.iter().map(|t| summarize(t, &q.golds)).collect();
            for s in &summaries {
                tracker.observe(&q.id, s);
            }
            let rewards = summaries
                .iter()
                .zip(&trajs)
                .map(|(s, t)| {
                    if t.is_backend_failure() {
                        return Ok(0.0);
                    }
                    reward.compute(&RewardContext {
                        summary: *s,
                        solve_rate_p: q.solve_rate,
                        // without a correct trajectory yet, every reward is
                        // gated to 0 by correctness anyway
                        min_calls_n: Some(tracker.get(&q.id).unwrap_or(0)),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            groups.push(Group::new(&q.id, mode, trajs, rewards, cfg.adv_epsilon)?);
        }
        drop(behavior);
        let stats = take_step(policy, &reference, &groups, cfg)?;
        outcome.record(step, stats, None);
    }
    Ok(outcome)
}

/// Picks the checkpoint maximizing `em × f1_aware`; ties keep the earliest.
pub fn select_checkpoint(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (em, f1)) in scores.iter().enumerate() {
        let v = em * f1;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
