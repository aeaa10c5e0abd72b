//! Whole-pipeline checks on the bundled toy benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adasearch_core::corpus::{build_index, load_corpus, IndexParams};
use adasearch_core::pipeline::{self, Agent, RunConfig, Stage};
use adasearch_core::rollout::{read_trajectory_log, replay};
use adasearch_core::toydata::{self, ToySpec};
use adasearch_core::{PolicyHandle, PromptMode, QAInstance, RolloutLimits, ScriptedPolicy};

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn set_output(dir: &Path) -> String {
    format!("output_dir={}", serde_json::to_string(&dir.to_string_lossy()).unwrap())
}

fn load(config: &str, extra: &[String]) -> RunConfig {
    RunConfig::load(&toy_dir().join(config), extra).unwrap()
}

#[test]
fn committed_toy_data_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    toydata::generate(ToySpec::default()).write(tmp.path()).unwrap();
    for f in ["corpus.jsonl", "toy-a.jsonl", "toy-b.jsonl", "scripted.json"] {
        let fresh = std::fs::read(tmp.path().join(f)).unwrap();
        let committed = std::fs::read(toy_dir().join(f)).unwrap();
        assert!(fresh == committed, "data/toy/{f} is stale; rerun `adasearch toy-data --out data/toy`");
    }
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(f).display()))
}

/// probe, stage-2 training, inference and evaluation with the trained
/// decision policy; returns every artifact's bytes.
fn full_run(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let base = [set_output(out), "train.epochs=30".to_string()];
    let cfg = load("train.toml", &base);
    pipeline::cmd_probe(&cfg).unwrap();
    pipeline::cmd_train(&cfg, Stage::Two).unwrap();
    let checkpoint = out.join("stage2.tsv");
    let mut with_ckpt = base.to_vec();
    with_ckpt.push(format!(
        "decision_backend={{kind=\"toy\", checkpoint={}}}",
        serde_json::to_string(&checkpoint.to_string_lossy()).unwrap()
    ));
    let cfg = load("train.toml", &with_ckpt);
    pipeline::cmd_infer(&cfg, None).unwrap();
    pipeline::cmd_evaluate(&cfg).unwrap();
    [
        "labels.jsonl",
        "sft.jsonl",
        "stage2.tsv",
        "train_stage2.csv",
        "inferences.jsonl",
        pipeline::RESULTS_FILE,
        pipeline::TRAJECTORY_FILE,
        pipeline::REPORT_FILE,
    ]
    .iter()
    .map(|f| (f.to_string(), read(out, f)))
    .collect()
}

#[test]
fn train_infer_evaluate_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = full_run(a.path());
    let second = full_run(b.path());
    for (name, bytes) in &first {
        assert!(!bytes.is_empty(), "{name} is empty");
        assert!(bytes == &second[name], "{name} differs between identical runs");
    }
}

#[test]
fn perfect_decision_search_accounting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load("run.toml", &[set_output(tmp.path())]);
    let report = pipeline::cmd_evaluate(&cfg).unwrap();
    assert_eq!(report.micro_f1_aware, 1.0, "scripted threshold decision should be perfect");

    let scripted = ScriptedPolicy::load(&toy_dir().join("scripted.json")).unwrap().to_file();
    let n = report.total_instances as f64;
    // greedy param answers are right exactly when p >= 0.5
    let unsolvable: Vec<_> = scripted.profiles.values().filter(|p| p.param_solve < 0.5).collect();
    let u = unsolvable.len() as f64 / n;
    let mean_searches = unsolvable.iter().map(|p| p.searches as f64).sum::<f64>() / unsolvable.len() as f64;
    assert!((report.micro_avg_search - u * mean_searches).abs() < 1e-12);

    // the same quantity measured from the logged search-mode trajectories
    let log = read_trajectory_log(&tmp.path().join(pipeline::TRAJECTORY_FILE)).unwrap();
    let searched: Vec<_> = log
        .iter()
        .filter(|r| r.stage == "solve" && r.trajectory.mode == PromptMode::Search)
        .collect();
    assert_eq!(searched.len(), unsolvable.len());
    let measured = searched.iter().map(|r| r.trajectory.num_search_calls as f64).sum::<f64>() / searched.len() as f64;
    assert!((report.micro_avg_search - u * measured).abs() < 1e-12);
}

#[test]
fn report_command_reproduces_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load("run.toml", &[set_output(tmp.path())]);
    pipeline::cmd_evaluate(&cfg).unwrap();
    let again = tmp.path().join("again.json");
    pipeline::cmd_report(tmp.path(), &again, cfg.rate_per_1000).unwrap();
    assert_eq!(read(tmp.path(), pipeline::REPORT_FILE), std::fs::read(&again).unwrap());

    let empty = tempfile::tempdir().unwrap();
    std::fs::write(empty.path().join(pipeline::RESULTS_FILE), "").unwrap();
    assert!(pipeline::cmd_report(empty.path(), &empty.path().join("r.json"), 5.0).is_err());
}

#[test]
fn logged_trajectories_replay_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load("run.toml", &[set_output(tmp.path())]);
    pipeline::cmd_evaluate(&cfg).unwrap();
    let policy = PolicyHandle::scripted(ScriptedPolicy::load(&toy_dir().join("scripted.json")).unwrap());
    let index = build_index(&load_corpus(&toy_dir().join("corpus.jsonl")).unwrap(), IndexParams::default());
    let questions: BTreeMap<String, QAInstance> = pipeline::load_benchmarks(&cfg)
        .unwrap()
        .into_values()
        .flatten()
        .map(|q| (q.id.clone(), q))
        .collect();
    let log = read_trajectory_log(&tmp.path().join(pipeline::TRAJECTORY_FILE)).unwrap();
    assert!(log.len() >= 400);
    for (i, record) in log.iter().enumerate() {
        assert_eq!(record.seq, i as u64);
        let q = &questions[&record.trajectory.question_id];
        let fresh = replay(record, &policy, &index, q).unwrap();
        assert_eq!(fresh, record.trajectory, "record {i} did not replay");
    }
}

#[test]
fn single_prompt_baseline_runs_an_oracle_for_searching_trajectories() {
    let cfg = load("run.toml", &[]);
    let questions: Vec<QAInstance> = pipeline::load_benchmarks(&cfg).unwrap().into_values().flatten().collect();
    let policy = PolicyHandle::scripted(ScriptedPolicy::load(&toy_dir().join("scripted.json")).unwrap());
    let index = build_index(&load_corpus(&toy_dir().join("corpus.jsonl")).unwrap(), IndexParams::default());
    let evaluated = pipeline::evaluate_benchmark(
        &Agent::Single {
            policy,
            system: adasearch_core::prompts::PromptKey::Search,
        },
        &index,
        &questions,
        &RolloutLimits::default(),
        0,
    )
    .unwrap();
    for e in &evaluated {
        // every toy profile searches at least once, so each needs an oracle run
        let stages: Vec<&str> = e.trajectories.iter().map(|(s, _)| *s).collect();
        assert_eq!(stages, ["single", "oracle"]);
        assert!(!e.result.predicted_no_search);
    }
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_path() {
    let cfg = load("run.toml", &["datasets.toy-c=\"nowhere.jsonl\"".into()]);
    let err = pipeline::cmd_evaluate(&cfg).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("nowhere.jsonl"), "{err}");
}
