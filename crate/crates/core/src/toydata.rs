//! The bundled toy benchmark.
//!
//! A deterministic generator for a small synthetic QA benchmark: a corpus
//! of invented entities, questions whose answer is the title of exactly one
//! document, and a scripted policy profile per question giving its
//! parametric solve probability. The committed copy under `data/toy/` is
//! the output of [`generate`] with [`DEFAULT_SEED`].

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::labeling::{write_dataset, QAInstance};
use crate::policy::{DecisionRule, ScriptedFile, ScriptedProfile};
use crate::seed;
use crate::textproto::GoldAnswers;

pub const DEFAULT_SEED: u64 = 20_240_611;
pub const BENCHMARKS: [&str; 2] = ["toy-a", "toy-b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub questions: usize,
    pub filler_docs: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            questions: 200,
            filler_docs: 300,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub corpus: Corpus,
    /// Questions per benchmark tag.
    pub datasets: BTreeMap<String, Vec<QAInstance>>,
    pub scripted: ScriptedFile,
}

impl ToyBenchmark {
    pub fn all_questions(&self) -> Vec<QAInstance> {
        self.datasets.values().flatten().cloned().collect()
    }

    /// Writes `corpus.jsonl`, one `<benchmark>.jsonl` per tag and
    /// `scripted.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.write_jsonl(&dir.join("corpus.jsonl"))?;
        for (name, qs) in &self.datasets {
            write_dataset(&dir.join(format!("{name}.jsonl")), qs)?;
        }
        let path = dir.join("scripted.json");
        let mut bytes = serde_json::to_vec_pretty(&self.scripted)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "th", "sk",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ei"];
const CODAS: [&str; 8] = ["", "n", "r", "l", "s", "th", "m", "x"];

struct Namer {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Namer {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(VOWELS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(CODAS.choose(&mut self.rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                let mut c = w.chars();
                let first = c.next().expect("non-empty").to_uppercase();
                return first.chain(c).collect();
            }
        }
    }
}

struct Template {
    kind: &'static str,
    question: &'static str,
    fact: &'static str,
}

const TEMPLATES: [Template; 4] = [
    Template {
        kind: "village",
        question: "In which village was {s} born?",
        fact: "{a} is a small village. The poet {s} was born in {a}.",
    },
    Template {
        kind: "person",
        question: "Who founded the trading house {s}?",
        fact: "{a} was a merchant. {a} founded the trading house {s}.",
    },
    Template {
        kind: "river",
        question: "Which river flows through the valley of {s}?",
        fact: "{a} is a river. The valley of {s} lies along the {a}.",
    },
    Template {
        kind: "instrument",
        question: "Which instrument did the composer {s} play?",
        fact: "The {a} is a string instrument. The composer {s} played the {a}.",
    },
];

const FILLER_NOUNS: [&str; 12] = [
    "markets", "bridges", "festivals", "orchards", "mills", "songs", "harbours", "libraries",
    "gardens", "quarries", "chapels", "vineyards",
];

/// Parametric solve probability for question `i`: about 45% of questions
/// are easy (`[0.8, 1]`), 45% hard (`[0, 0.2]`) and 10% in between.
fn solve_probability(rng: &mut ChaCha8Rng) -> f64 {
    let bucket: f64 = rng.random();
    let p: f64 = if bucket < 0.45 {
        rng.random_range(0.8..=1.0)
    } else if bucket < 0.9 {
        rng.random_range(0.0..=0.2)
    } else {
        rng.random_range(0.3..=0.7)
    };
    (p * 100.0).round() / 100.0
}

pub fn generate(spec: ToySpec) -> ToyBenchmark {
    let mut rng = seed::rng(spec.seed);
    let mut namer = Namer {
        rng: seed::rng(spec.seed ^ 0x5eed),
        used: HashSet::new(),
    };
    let mut docs = Vec::new();
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    for i in 0..spec.questions {
        let t = &TEMPLATES[i % TEMPLATES.len()];
        let answer = namer.word(2);
        let subject = format!("{} {}", namer.word(2), namer.word(3));
        let filler = FILLER_NOUNS.choose(&mut rng).expect("non-empty");
        docs.push(Document {
            id: format!("doc-{:04}", docs.len()),
            title: answer.clone(),
            text: format!(
                "{} It is also known for its {filler}.",
                t.fact.replace("{a}", &answer).replace("{s}", &subject)
            ),
        });
        questions.push((i, t.question.replace("{s}", &subject)));
        answers.push(answer);
    }
    for _ in 0..spec.filler_docs {
        let t = TEMPLATES.choose(&mut rng).expect("non-empty");
        let name = namer.word(2);
        let a = FILLER_NOUNS.choose(&mut rng).expect("non-empty");
        let b = FILLER_NOUNS.choose(&mut rng).expect("non-empty");
        docs.push(Document {
            id: format!("doc-{:04}", docs.len()),
            title: name.clone(),
            text: format!("{name} is a {} known for its {a} and {b}.", t.kind),
        });
    }
    // shuffle document ids away from question order
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let docs: Vec<Document> = order
        .iter()
        .enumerate()
        .map(|(new_id, &old)| Document {
            id: format!("doc-{new_id:04}"),
            ..docs[old].clone()
        })
        .collect();

    let mut datasets: BTreeMap<String, Vec<QAInstance>> = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    let n = answers.len();
    for (i, question) in questions {
        let bench = BENCHMARKS[i % BENCHMARKS.len()];
        let id = format!("{bench}-{:03}", i / BENCHMARKS.len());
        let golds = GoldAnswers::new([answers[i].clone()]).expect("generated names are non-empty");
        let p = solve_probability(&mut rng);
        let searches = if rng.random::<f64>() < 0.7 { 1 } else { 2 };
        let search_solve = (rng.random_range(0.85..=1.0f64) * 100.0).round() / 100.0;
        // a same-template wrong answer
        let distractor = answers[(i + TEMPLATES.len()) % n].clone();
        profiles.insert(
            id.clone(),
            ScriptedProfile::new(answers[i].clone(), distractor)
                .with_param_solve(p)
                .with_search_solve(search_solve)
                .with_searches(searches)
                .with_decision(DecisionRule::Threshold { rho: 0.5 }),
        );
        datasets
            .entry(bench.to_string())
            .or_default()
            .push(QAInstance::new(id, question, golds, bench));
    }
    ToyBenchmark {
        corpus: Corpus::from_documents(docs).expect("generated ids are unique"),
        datasets,
        scripted: ScriptedFile {
            fixtures: Vec::new(),
            profiles,
        },
    }
}

/// Three fixed questions for examples and unit tests.
pub fn tiny_dataset() -> Vec<QAInstance> {
    [
        ("t1", "Who designed shoes with red soles?", "Christian Louboutin"),
        ("t2", "Which village is Southrey near?", "Bardney"),
        ("t3", "What is the capital of France?", "Paris"),
    ]
    .into_iter()
    .map(|(id, q, a)| QAInstance::new(id, q, GoldAnswers::new([a]).expect("non-empty"), "tiny"))
    .collect()
}
