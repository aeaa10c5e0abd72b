//! Document corpus, BM25 index and the retrieval environment.
//!
//! The bundled environment is lexical: an inverted index scored with Okapi
//! BM25 using the non-negative `ln(1 + (N - df + 0.5) / (df + 0.5))` IDF.
//! Dense retrievers are reached through [`RemoteRetriever`], which speaks a
//! small JSON protocol over HTTP.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, BackendErrorKind, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocHit {
    pub doc: Document,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub k1: f64,
    pub b: f64,
    pub topk: usize,
    /// Per-document character cap when rendering information blocks.
    pub max_doc_chars: Option<usize>,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            topk: 3,
            max_doc_chars: None,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return Err(Error::Validation(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Validation(format!("b must be in [0,1], got {}", self.b)));
        }
        if self.topk == 0 {
            return Err(Error::Validation("topk must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    docs: Vec<Document>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &docs {
            validate_document(d).map_err(Error::Validation)?;
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Validation(format!("duplicate document id `{}`", d.id)));
            }
        }
        Ok(Self { docs })
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for d in &self.docs {
            serde_json::to_writer(&mut out, d)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn validate_document(d: &Document) -> std::result::Result<(), String> {
    if d.id.trim().is_empty() {
        return Err("document id is empty".into());
    }
    if d.title.trim().is_empty() && d.text.trim().is_empty() {
        return Err(format!("document `{}` has neither title nor text", d.id));
    }
    Ok(())
}

/// Reads a line-delimited JSON corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        validate_document(&doc).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        if seen.insert(doc.id.clone(), lineno).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: doc.id,
            });
        }
        docs.push(doc);
    }
    Ok(Corpus { docs })
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// BM25 inverse document frequency with `ln(1 + ·)` smoothing.
pub fn bm25_idf(num_docs: usize, doc_freq: usize) -> f64 {
    let n = num_docs as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

/// Immutable inverted index over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: IndexParams,
    docs: Vec<Document>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    // BTreeMap keeps the serialized cache byte-stable
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Indexes title and text together.
pub fn build_index(corpus: &Corpus, params: IndexParams) -> Bm25Index {
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (i, doc) in corpus.docs.iter().enumerate() {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        let tokens = tokenize(&format!("{} {}", doc.title, doc.text));
        doc_lengths.push(tokens.len() as u32);
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting {
                doc: i as u32,
                tf: count,
            });
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    let avg_doc_length = if doc_lengths.is_empty() {
        0.0
    } else {
        total as f64 / doc_lengths.len() as f64
    };
    Bm25Index {
        params,
        docs: corpus.docs.clone(),
        doc_lengths,
        avg_doc_length,
        postings,
    }
}

impl Bm25Index {
    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Top-`topk` documents for `query`, score descending, id ascending on ties.
    /// Each query token contributes once per occurrence.
    pub fn search(&self, query: &str, topk: usize) -> Vec<DocHit> {
        let terms = tokenize(query);
        if terms.is_empty() || self.docs.is_empty() || topk == 0 {
            return Vec::new();
        }
        let n = self.docs.len();
        let k1 = self.params.k1;
        let b = self.params.b;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = bm25_idf(n, list.len());
            for p in list {
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let tf = f64::from(p.tf);
                let norm = tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avg_doc_length));
                *scores.entry(p.doc).or_default() += idf * norm;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0 as usize].id.cmp(&self.docs[b.0 as usize].id))
        });
        ranked
            .into_iter()
            .take(topk)
            .map(|(i, score)| DocHit {
                doc: self.docs[i as usize].clone(),
                score,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub const NO_RESULTS: &str = "No results found.";

/// Formats hits as the `<information>` block injected after a search.
pub fn render_information_block(hits: &[DocHit]) -> String {
    render_information_block_with_limit(hits, None)
}

pub fn render_information_block_with_limit(hits: &[DocHit], max_chars: Option<usize>) -> String {
    let mut out = String::from("<information>\n");
    if hits.is_empty() {
        out.push_str(NO_RESULTS);
        out.push('\n');
    }
    for (i, hit) in hits.iter().enumerate() {
        let text: String = match max_chars {
            Some(limit) => hit.doc.text.chars().take(limit).collect(),
            None => hit.doc.text.clone(),
        };
        out.push_str(&format!("Doc {}: \"{}\"\n{}\n", i + 1, hit.doc.title, text));
    }
    out.push_str("</information>");
    out
}

/// Anything that can answer a top-k query.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, topk: usize) -> Result<Vec<DocHit>, BackendError>;

    /// Default fan-out for rollouts.
    fn topk(&self) -> usize {
        3
    }

    fn max_doc_chars(&self) -> Option<usize> {
        None
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query: &str, topk: usize) -> Result<Vec<DocHit>, BackendError> {
        Ok(self.search(query, topk))
    }

    fn topk(&self) -> usize {
        self.params.topk
    }

    fn max_doc_chars(&self) -> Option<usize> {
        self.params.max_doc_chars
    }
}

/// A retriever with no documents; used where rollouts never search.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyRetriever;

impl Retriever for EmptyRetriever {
    fn retrieve(&self, _query: &str, _topk: usize) -> Result<Vec<DocHit>, BackendError> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Serialize)]
struct RetrieveRequest<'a> {
    query: &'a str,
    topk: usize,
}

#[derive(Debug, Deserialize)]
struct RetrieveResponse {
    docs: Vec<RemoteDoc>,
}

#[derive(Debug, Deserialize)]
struct RemoteDoc {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
    score: f64,
}

/// Client for `POST {base_url}/retrieve`.
#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    endpoint: String,
    topk: usize,
    client: reqwest::blocking::Client,
}

impl RemoteRetriever {
    pub fn new(base_url: &str, topk: usize, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint: format!("{}/retrieve", base_url.trim_end_matches('/')),
            topk,
            client,
        })
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, topk: usize) -> Result<Vec<DocHit>, BackendError> {
        let fail = |kind| BackendError {
            endpoint: self.endpoint.clone(),
            kind,
            attempts: 1,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&RetrieveRequest { query, topk })
            .send()
            .map_err(|e| fail(BackendErrorKind::Transport(e.to_string())))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(fail(BackendErrorKind::Status(status.as_u16())));
        }
        let body: RetrieveResponse = resp
            .json()
            .map_err(|e| fail(BackendErrorKind::Malformed(e.to_string())))?;
        let mut hits = Vec::with_capacity(body.docs.len());
        for d in body.docs {
            if !d.score.is_finite() {
                return Err(fail(BackendErrorKind::Malformed("non-finite score".into())));
            }
            hits.push(DocHit {
                doc: Document {
                    id: d.id,
                    title: d.title,
                    text: d.text,
                },
                score: d.score,
            });
        }
        hits.truncate(topk);
        Ok(hits)
    }

    fn topk(&self) -> usize {
        self.topk
    }
}
