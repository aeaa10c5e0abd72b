//! `adasearch` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or backend
//! error, 4 threshold failure under `evaluate --assert`.

use std::path::PathBuf;
use std::process::ExitCode;

use adasearch_core::pipeline::{self, RunConfig, Stage};
use adasearch_core::{Error, IndexParams};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "adasearch", version, about = "Adaptive search-agent harness")]
struct Cli {
    /// Log filter, e.g. `info` or `adasearch_core=debug`.
    #[arg(long, global = true, default_value = "warn", env = "ADASEARCH_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for instance-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            // absolute so it does not resolve against the config directory
            let d = std::path::absolute(d).map_err(|e| Error::io(d, e))?;
            overrides.push(format!("output_dir={}", toml_string(&d.to_string_lossy())));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a BM25 index from a corpus JSONL file.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory; receives `index.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = IndexParams::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = IndexParams::default().b)]
        b: f64,
        #[arg(long, default_value_t = IndexParams::default().topk)]
        topk: usize,
    },
    /// Write the bundled toy benchmark (corpus, datasets, scripted profiles).
    ToyData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe solve rates and write difficulty-balanced train/validation sets.
    BuildDataset(ConfigArgs),
    /// Write stage-2 decision labels and the matching SFT records.
    Probe(ConfigArgs),
    /// Train the toy policy.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// 1, 2, e2e or baseline.
        #[arg(long)]
        stage: Stage,
    },
    /// Two-stage inference on the configured datasets or one question.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        question: Option<String>,
    },
    /// Evaluate on every configured benchmark and write a report.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Exit with status 4 when a configured threshold is missed.
        #[arg(long)]
        assert: bool,
    },
    /// Re-aggregate a results directory into a report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = adasearch_core::metrics::DEFAULT_RATE_PER_1000)]
        rate: f64,
    },
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Index { corpus, out, k1, b, topk } => {
            let params = IndexParams {
                k1,
                b,
                topk,
                ..IndexParams::default()
            };
            let path = pipeline::cmd_index(&corpus, &out, params)?;
            println!("wrote {}", path.display());
        }
        Command::ToyData { out } => {
            pipeline::cmd_toy_data(&out)?;
            println!("wrote toy benchmark to {}", out.display());
        }
        Command::BuildDataset(args) => {
            let cfg = args.load()?;
            let built = pipeline::cmd_build_dataset(&cfg)?;
            println!(
                "train {} validation {} (easy available {}, hard available {})",
                built.train.len(),
                built.validation.len(),
                built.easy_available,
                built.hard_available
            );
        }
        Command::Probe(args) => {
            let cfg = args.load()?;
            let labels = pipeline::cmd_probe(&cfg)?;
            let yes = labels.iter().filter(|(_, a)| *a == adasearch_core::Assessment::Yes).count();
            println!("labeled {} questions: {yes} yes, {} no", labels.len(), labels.len() - yes);
        }
        Command::Train { cfg, stage } => {
            let cfg = cfg.load()?;
            let outcome = pipeline::cmd_train(&cfg, stage)?;
            let last = outcome.log.last();
            println!(
                "{} steps, final mean reward {:.4}{}",
                outcome.log.len(),
                last.map_or(0.0, |s| s.mean_reward),
                outcome
                    .final_label_accuracy
                    .map(|a| format!(", label accuracy {a:.4}"))
                    .unwrap_or_default()
            );
        }
        Command::Infer { cfg, question } => {
            let cfg = cfg.load()?;
            let results = pipeline::cmd_infer(&cfg, question.as_deref())?;
            if question.is_some() {
                for r in &results {
                    println!("decision: {}", r.decision);
                    println!("answer: {}", r.answer.as_deref().unwrap_or("<none>"));
                }
            } else {
                println!("wrote {} inferences", results.len());
            }
        }
        Command::Evaluate { cfg, assert } => {
            let cfg = cfg.load()?;
            let report = pipeline::cmd_evaluate(&cfg)?;
            println!(
                "EM {:.4}  F1_aware macro {:.4} micro {:.4}  avg search {:.4}  est cost ${:.4}",
                report.macro_em,
                report.macro_f1_aware,
                report.micro_f1_aware,
                report.micro_avg_search,
                report.est_cost_usd
            );
            if assert {
                let failed = cfg.thresholds.violations(&report);
                if !failed.is_empty() {
                    for f in failed {
                        eprintln!("threshold failed: {f}");
                    }
                    return Ok(ExitCode::from(4));
                }
            }
        }
        Command::Report { input, out, rate } => {
            let report = pipeline::cmd_report(&input, &out, rate)?;
            println!("{} instances, macro F1_aware {:.4}", report.total_instances, report.macro_f1_aware);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
