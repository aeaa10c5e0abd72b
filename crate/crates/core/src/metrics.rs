//! Knowledge-boundary awareness metrics.
//!
//! The positive class is "no search needed". A prediction is compared with
//! an oracle that asks whether one greedy parametric-only attempt answers
//! correctly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::EmptyRetriever;
use crate::error::{Error, Result};
use crate::labeling::QAInstance;
use crate::policy::{GenParams, PolicyHandle, PromptMode};
use crate::rollout::{run_trajectory, summarize, RolloutLimits};
use crate::textproto::Assessment;

/// Default retrieval price, USD per 1000 queries.
pub const DEFAULT_RATE_PER_1000: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted_no_search: bool, oracle: bool) {
        match (predicted_no_search, oracle) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion_from_pairs(pairs: &[(bool, bool)]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for &(pred, oracle) in pairs {
        c.record(pred, oracle);
    }
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AwarenessScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the no-search decision. Any zero
/// denominator yields 0.
pub fn f1_aware(counts: &ConfusionCounts) -> AwarenessScores {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    AwarenessScores { precision, recall, f1 }
}

/// Whether one greedy param-mode attempt answers `question` exactly.
/// `None` when the backend failed.
pub fn oracle_label(
    policy: &PolicyHandle,
    question: &QAInstance,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<Option<bool>> {
    let t = run_trajectory(
        policy,
        &EmptyRetriever,
        question,
        PromptMode::Param,
        limits,
        &GenParams::greedy(seed),
    )?;
    if t.is_backend_failure() {
        return Ok(None);
    }
    Ok(Some(summarize(&t, &question.golds).em))
}

pub fn cost_estimate(total_queries: u64, rate_per_1000: f64) -> f64 {
    total_queries as f64 * rate_per_1000 / 1000.0
}

/// Evaluation outcome for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub question_id: String,
    pub benchmark: String,
    pub em: bool,
    pub subem: bool,
    pub predicted_no_search: bool,
    pub oracle: bool,
    pub searches: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Assessment>,
    /// Excluded from every denominator; counted in the report.
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScores {
    pub instances: u64,
    pub em: f64,
    pub f1_aware: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: ConfusionCounts,
    pub searches: u64,
    pub avg_search: f64,
    pub backend_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_benchmark: BTreeMap<String, BenchmarkScores>,
    /// Unweighted mean over benchmarks with at least one evaluated instance.
    pub macro_em: f64,
    pub macro_f1_aware: f64,
    /// F1 of the confusion counts pooled over all benchmarks.
    pub micro_f1_aware: f64,
    pub micro_avg_search: f64,
    pub total_instances: u64,
    pub total_searches: u64,
    pub est_cost_usd: f64,
    pub backend_failures: u64,
    pub config_echo: serde_json::Value,
}

pub fn aggregate_report(
    results: &[InstanceResult],
    config_echo: serde_json::Value,
    rate_per_1000: f64,
) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::InsufficientData("no evaluation results to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&InstanceResult>> = BTreeMap::new();
    for r in results {
        groups.entry(&r.benchmark).or_default().push(r);
    }
    let mut per_benchmark = BTreeMap::new();
    let mut pooled = ConfusionCounts::default();
    let (mut total_instances, mut total_searches, mut failures) = (0u64, 0u64, 0u64);
    for (name, rs) in groups {
        let ok: Vec<&&InstanceResult> = rs.iter().filter(|r| !r.backend_failure).collect();
        let n = ok.len() as u64;
        let confusion = confusion_from_pairs(
            &ok.iter().map(|r| (r.predicted_no_search, r.oracle)).collect::<Vec<_>>(),
        );
        let scores = f1_aware(&confusion);
        let searches: u64 = ok.iter().map(|r| r.searches).sum();
        let bench_failures = (rs.len() - ok.len()) as u64;
        pooled.merge(&confusion);
        total_instances += n;
        total_searches += searches;
        failures += bench_failures;
        per_benchmark.insert(
            name.to_string(),
            BenchmarkScores {
                instances: n,
                em: ratio(ok.iter().filter(|r| r.em).count() as u64, n),
                f1_aware: scores.f1,
                precision: scores.precision,
                recall: scores.recall,
                confusion,
                searches,
                avg_search: ratio(searches, n),
                backend_failures: bench_failures,
            },
        );
    }
    let scored: Vec<&BenchmarkScores> = per_benchmark.values().filter(|b| b.instances > 0).collect();
    let mean = |f: fn(&BenchmarkScores) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|b| f(b)).sum::<f64>() / scored.len() as f64
        }
    };
    Ok(Report {
        macro_em: mean(|b| b.em),
        macro_f1_aware: mean(|b| b.f1_aware),
        micro_f1_aware: f1_aware(&pooled).f1,
        micro_avg_search: ratio(total_searches, total_instances),
        total_instances,
        total_searches,
        est_cost_usd: cost_estimate(total_searches, rate_per_1000),
        backend_failures: failures,
        per_benchmark,
        config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ScriptedPolicy, ScriptedProfile};
    use crate::textproto::GoldAnswers;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn confusion_cases() {
        assert_eq!(confusion_from_pairs(&[(true, true)]), ConfusionCounts { tp: 1, ..Default::default() });
        assert_eq!(
            confusion_from_pairs(&[(true, false), (false, true)]),
            ConfusionCounts { fp: 1, fn_: 1, ..Default::default() }
        );
        assert_eq!(confusion_from_pairs(&[]), ConfusionCounts::default());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_aware(&ConfusionCounts::default()), AwarenessScores::default());
        let s = f1_aware(&ConfusionCounts { tp: 10, ..Default::default() });
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = f1_aware(&ConfusionCounts { tp: 100, fp: 50, fn_: 25, tn: 0 });
        assert_abs_diff_eq!(s.precision, 0.6667, epsilon = 1e-4);
        assert_abs_diff_eq!(s.recall, 0.8, epsilon = 1e-4);
        assert_abs_diff_eq!(s.f1, 0.7273, epsilon = 1e-4);
        // tp = 200 / (200 + 50 + 25)
        assert_abs_diff_eq!(s.f1, 200.0 / 275.0, epsilon = 1e-12);
    }

    #[test]
    fn costs() {
        assert_eq!(cost_estimate(1000, DEFAULT_RATE_PER_1000), 5.0);
        assert_eq!(cost_estimate(0, DEFAULT_RATE_PER_1000), 0.0);
        assert_abs_diff_eq!(cost_estimate(55_840, DEFAULT_RATE_PER_1000), 279.2, epsilon = 1e-9);
    }

    fn result(bench: &str, em: bool, searches: u64) -> InstanceResult {
        InstanceResult {
            question_id: "q".into(),
            benchmark: bench.into(),
            em,
            subem: em,
            predicted_no_search: searches == 0,
            oracle: em,
            searches,
            decision: None,
            backend_failure: false,
        }
    }

    #[test]
    fn report_aggregation() {
        let mut rs = Vec::new();
        for i in 0..10 {
            rs.push(result("a", i < 2, 1));
        }
        for i in 0..90 {
            let mut r = result("b", i < 36, 1);
            r.predicted_no_search = false;
            rs.push(r);
        }
        let rep = aggregate_report(&rs, serde_json::json!({}), DEFAULT_RATE_PER_1000).unwrap();
        assert_abs_diff_eq!(rep.per_benchmark["a"].em, 0.2);
        assert_abs_diff_eq!(rep.per_benchmark["b"].em, 0.4);
        assert_abs_diff_eq!(rep.macro_em, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.micro_avg_search, 1.0);
        assert_eq!(rep.est_cost_usd, rep.total_searches as f64 * 0.005);

        let single = aggregate_report(&rs[..10], serde_json::Value::Null, DEFAULT_RATE_PER_1000).unwrap();
        assert_eq!(single.macro_em, single.per_benchmark["a"].em);
        assert_eq!(single.macro_f1_aware, single.per_benchmark["a"].f1_aware);

        assert!(aggregate_report(&[], serde_json::Value::Null, 5.0).is_err());
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let mut failed = result("a", true, 3);
        failed.backend_failure = true;
        let rep = aggregate_report(&[result("a", true, 0), failed], serde_json::Value::Null, 5.0).unwrap();
        assert_eq!(rep.backend_failures, 1);
        assert_eq!(rep.total_instances, 1);
        assert_eq!(rep.total_searches, 0);
    }

    #[test]
    fn oracle_from_greedy_param_run() {
        let q = QAInstance::new("q", "Who?", GoldAnswers::new(["Christian Louboutin"]).unwrap(), "t");
        let limits = RolloutLimits::default();
        let good = PolicyHandle::scripted(
            ScriptedPolicy::new().with_profile("q", ScriptedProfile::new("Christian Louboutin", "Manolo Blahnik").with_param_solve(0.9)),
        );
        let bad = PolicyHandle::scripted(
            ScriptedPolicy::new().with_profile("q", ScriptedProfile::new("Christian Louboutin", "Manolo Blahnik").with_param_solve(0.1)),
        );
        assert_eq!(oracle_label(&good, &q, &limits, 0).unwrap(), Some(true));
        assert_eq!(oracle_label(&bad, &q, &limits, 0).unwrap(), Some(false));
        assert_eq!(oracle_label(&good, &q, &limits, 7).unwrap(), oracle_label(&good, &q, &limits, 7).unwrap());
    }

    proptest! {
        #[test]
        fn f1_properties(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200), seed in any::<u64>()) {
            let c = confusion_from_pairs(&pairs);
            prop_assert_eq!(c.total(), pairs.len() as u64);
            let mut shuffled = pairs.clone();
            let mut rng = crate::seed::rng(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            prop_assert_eq!(f1_aware(&confusion_from_pairs(&shuffled)), f1_aware(&c));
            let s = f1_aware(&c);
            prop_assert!(s.f1 <= 1.0 && s.f1 <= 2.0 * s.precision.min(s.recall) + 1e-15);
            let more = ConfusionCounts { tp: c.tp + 1, ..c };
            prop_assert!(f1_aware(&more).f1 >= s.f1);
        }
    }
}
