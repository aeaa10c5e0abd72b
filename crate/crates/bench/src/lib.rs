//! Shared fixtures for the criterion benches.

use adasearch_core::grpo::{Group, TrainConfig};
use adasearch_core::policy::PromptMode;
use adasearch_core::rollout::{run_group, summarize};
use adasearch_core::toydata::{self, ToyBenchmark, ToySpec};
use adasearch_core::{build_index, Bm25Index, GenParams, PolicyHandle, QAInstance, RolloutLimits, ToySoftmaxPolicy};

pub struct Fixture {
    pub toy: ToyBenchmark,
    pub index: Bm25Index,
    pub questions: Vec<QAInstance>,
}

pub fn fixture() -> Fixture {
    let toy = toydata::generate(ToySpec::default());
    let index = build_index(&toy.corpus, Default::default());
    let questions = toy.all_questions();
    Fixture { toy, index, questions }
}

/// One search-mode group per question, sampled from a fresh toy policy.
pub fn search_groups(f: &Fixture, policy: &ToySoftmaxPolicy, cfg: &TrainConfig) -> Vec<Group> {
    let handle = PolicyHandle::toy(policy.clone());
    let limits = RolloutLimits::default();
    f.questions
        .iter()
        .map(|q| {
            let trajs = run_group(
                &handle,
                &f.index,
                q,
                PromptMode::Search,
                cfg.group_size_search,
                &limits,
                &GenParams::rollout(cfg.seed),
            )
            .expect("toy rollouts");
            let rewards = trajs
                .iter()
                .map(|t| if summarize(t, &q.golds).em { 1.0 } else { 0.0 })
                .collect();
            Group::new(&q.id, PromptMode::Search, trajs, rewards, cfg.adv_epsilon).expect("valid group")
        })
        .collect()
}
