use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenerateRequest, Generation, Message, PromptMode, Role};
use crate::error::{Error, Result};
use crate::labeling::QAInstance;
use crate::seed::{self, SeedMixer};
use crate::textproto::{extract_tag, information_titles, normalize_answer, Tag};

/// A bandit context: one per (prompt mode, question). Search mode has a
/// second context per question, suffixed with [`RETRIEVED_SUFFIX`], used once
/// documents have been returned.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub mode: PromptMode,
    pub question_id: String,
}

impl ContextKey {
    pub fn new(mode: PromptMode, question_id: impl Into<String>) -> Self {
        Self {
            mode,
            question_id: question_id.into(),
        }
    }
}

/// Question-id suffix of the post-retrieval search context.
pub const RETRIEVED_SUFFIX: &str = "+retrieved";

/// The context a toy turn samples from. `retrieved` is whether an earlier
/// turn of the trajectory received an information block.
pub fn context_for(mode: PromptMode, question_id: &str, retrieved: bool) -> ContextKey {
    if mode == PromptMode::Search && retrieved {
        ContextKey::new(mode, format!("{question_id}{RETRIEVED_SUFFIX}"))
    } else {
        ContextKey::new(mode, question_id)
    }
}

/// Whether an environment response carries retrieved documents.
pub fn is_retrieval(response: &str) -> bool {
    extract_tag(response, Tag::Information).is_some()
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.mode, self.question_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThetaKey {
    pub context: ContextKey,
    pub token: String,
}

/// Sparse gradient (or update) over logits.
pub type ThetaGrad = BTreeMap<ThetaKey, f64>;

/// What an action token renders to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyAction {
    /// Emit this completion verbatim.
    Emit(String),
    /// Answer with the title of the first document in the most recent
    /// information block, or `unknown` when no documents have been seen.
    AnswerFromLastDocs,
}

#[derive(Debug, Clone, PartialEq)]
struct ActionEntry {
    token: String,
    action: ToyAction,
    logit: f64,
}

/// Tabular softmax policy: one logit per (context, action token).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToySoftmaxPolicy {
    contexts: BTreeMap<ContextKey, Vec<ActionEntry>>,
}

pub const DECISION_TOKENS: [&str; 2] = ["yes", "no"];
pub const PARAM_TOKENS: [&str; 3] = ["gold", "distractor-1", "distractor-2"];
pub const SEARCH_TOKENS: [&str; 2] = ["search", "answer"];

impl ToySoftmaxPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the standard vocabularies for every question and mode, all
    /// logits zero. Param-mode distractors are the gold answers of the next
    /// questions in dataset order.
    pub fn for_dataset(dataset: &[QAInstance]) -> Self {
        let mut policy = Self::new();
        let n = dataset.len();
        for (i, q) in dataset.iter().enumerate() {
            let gold = q.golds.first().to_string();
            let gold_norm = normalize_answer(&gold);
            let mut distractors = Vec::new();
            for step in 1..n {
                let cand = dataset[(i + step) % n].golds.first();
                let norm = normalize_answer(cand);
                if norm != gold_norm
                    && !distractors.iter().any(|d: &String| normalize_answer(d) == norm)
                {
                    distractors.push(cand.to_string());
                }
                if distractors.len() == 2 {
                    break;
                }
            }
            while distractors.len() < 2 {
                distractors.push(format!("unknown {}", distractors.len() + 1));
            }

            let answer = |s: &str| ToyAction::Emit(format!("<answer>{s}</answer>"));
            policy.insert_context(
                ContextKey::new(PromptMode::Param, &q.id),
                vec![
                    (PARAM_TOKENS[0].into(), answer(&gold), 0.0),
                    (PARAM_TOKENS[1].into(), answer(&distractors[0]), 0.0),
                    (PARAM_TOKENS[2].into(), answer(&distractors[1]), 0.0),
                ],
            );
            policy.insert_context(
                ContextKey::new(PromptMode::Decision, &q.id),
                DECISION_TOKENS
                    .iter()
                    .map(|t| {
                        (
                            t.to_string(),
                            ToyAction::Emit(format!("<assessment>{t}</assessment>")),
                            0.0,
                        )
                    })
                    .collect(),
            );
            for retrieved in [false, true] {
                policy.insert_context(
                    context_for(PromptMode::Search, &q.id, retrieved),
                    vec![
                        (
                            SEARCH_TOKENS[0].into(),
                            ToyAction::Emit(format!("<search>{}</search>", q.question)),
                            0.0,
                        ),
                        (SEARCH_TOKENS[1].into(), ToyAction::AnswerFromLastDocs, 0.0),
                    ],
                );
            }
        }
        policy
    }

    /// Adds or replaces a context. Tokens must be distinct and logits finite.
    pub fn insert_context(&mut self, key: ContextKey, actions: Vec<(String, ToyAction, f64)>) {
        let entries = actions
            .into_iter()
            .map(|(token, action, logit)| {
                assert!(logit.is_finite(), "non-finite logit for {key}/{token}");
                ActionEntry { token, action, logit }
            })
            .collect::<Vec<_>>();
        for (i, e) in entries.iter().enumerate() {
            assert!(
                entries[..i].iter().all(|o| o.token != e.token),
                "duplicate token `{}` in {key}",
                e.token
            );
        }
        assert!(!entries.is_empty(), "context {key} has no actions");
        self.contexts.insert(key, entries);
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextKey> {
        self.contexts.keys()
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.contexts.values().map(Vec::len).sum()
    }

    fn entries(&self, key: &ContextKey) -> Result<&[ActionEntry]> {
        self.contexts
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownContext(key.to_string()))
    }

    fn position(&self, key: &ContextKey, token: &str) -> Result<usize> {
        self.entries(key)?
            .iter()
            .position(|e| e.token == token)
            .ok_or_else(|| Error::UnknownAction {
                context: key.to_string(),
                action: token.to_string(),
            })
    }

    pub fn tokens(&self, key: &ContextKey) -> Result<Vec<&str>> {
        Ok(self.entries(key)?.iter().map(|e| e.token.as_str()).collect())
    }

    pub fn logit(&self, key: &ContextKey, token: &str) -> Result<f64> {
        let i = self.position(key, token)?;
        Ok(self.contexts[key][i].logit)
    }

    pub fn set_logit(&mut self, key: &ContextKey, token: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Validation(format!("non-finite logit for {key}/{token}")));
        }
        let i = self.position(key, token)?;
        self.contexts.get_mut(key).expect("checked")[i].logit = value;
        Ok(())
    }

    /// Softmax over the context's logits, in vocabulary order.
    pub fn probs(&self, key: &ContextKey) -> Result<Vec<f64>> {
        Ok(softmax(self.entries(key)?.iter().map(|e| e.logit), 1.0))
    }

    pub fn prob(&self, key: &ContextKey, token: &str) -> Result<f64> {
        let i = self.position(key, token)?;
        Ok(self.probs(key)?[i])
    }

    pub fn logprob(&self, key: &ContextKey, token: &str) -> Result<f64> {
        let i = self.position(key, token)?;
        Ok(log_softmax(&self.logits(key)?)[i])
    }

    fn logits(&self, key: &ContextKey) -> Result<Vec<f64>> {
        Ok(self.entries(key)?.iter().map(|e| e.logit).collect())
    }

    /// `log π(token | key)` and its gradient with respect to the context's
    /// logits: `1{a = token} − π(a | key)`.
    pub fn action_logprob_and_grad(&self, key: &ContextKey, token: &str) -> Result<(f64, ThetaGrad)> {
        let i = self.position(key, token)?;
        let entries = self.entries(key)?;
        let logits = self.logits(key)?;
        let lp = log_softmax(&logits);
        let grad = entries
            .iter()
            .zip(&lp)
            .enumerate()
            .map(|(j, (e, l))| {
                let indicator = if i == j { 1.0 } else { 0.0 };
                (theta_key(key, &e.token), indicator - l.exp())
            })
            .collect();
        Ok((lp[i], grad))
    }

    /// Deep copy used as the KL reference or as the rollout-time policy.
    pub fn snapshot_reference(&self) -> ToySoftmaxPolicy {
        self.clone()
    }

    /// `KL(self(·|key) ‖ reference(·|key))` in closed form.
    pub fn kl(&self, reference: &ToySoftmaxPolicy, key: &ContextKey) -> Result<f64> {
        let (lp, lq) = self.paired_logprobs(reference, key)?;
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        // rounding can leave a tiny negative value when the two agree
        Ok(kl.max(0.0))
    }

    /// Gradient of [`kl`](Self::kl) with respect to this policy's logits:
    /// `p_j (log p_j − log q_j − KL)`.
    pub fn kl_grad(&self, reference: &ToySoftmaxPolicy, key: &ContextKey) -> Result<ThetaGrad> {
        let (lp, lq) = self.paired_logprobs(reference, key)?;
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        Ok(self
            .entries(key)?
            .iter()
            .zip(lp.iter().zip(&lq))
            .map(|(e, (p, q))| (theta_key(key, &e.token), p.exp() * (p - q - kl)))
            .collect())
    }

    fn paired_logprobs(&self, reference: &ToySoftmaxPolicy, key: &ContextKey) -> Result<(Vec<f64>, Vec<f64>)> {
        let mine = self.entries(key)?;
        let theirs = reference.entries(key)?;
        if mine.len() != theirs.len() || mine.iter().zip(theirs).any(|(a, b)| a.token != b.token) {
            return Err(Error::Validation(format!(
                "reference vocabulary differs from the live policy in {key}"
            )));
        }
        Ok((
            log_softmax(&self.logits(key)?),
            log_softmax(&reference.logits(key)?),
        ))
    }

    /// `θ += scale · delta`. Fails without modifying anything if an entry is
    /// unknown or a result would be non-finite.
    pub fn apply_update(&mut self, delta: &ThetaGrad, scale: f64) -> Result<()> {
        let mut staged = Vec::with_capacity(delta.len());
        for (k, v) in delta {
            let i = self.position(&k.context, &k.token)?;
            let new = self.contexts[&k.context][i].logit + scale * v;
            if !new.is_finite() {
                return Err(Error::Validation(format!(
                    "update drives {}/{} to a non-finite value",
                    k.context, k.token
                )));
            }
            staged.push((&k.context, i, new));
        }
        for (key, i, new) in staged {
            self.contexts.get_mut(key).expect("checked")[i].logit = new;
        }
        Ok(())
    }

    pub(super) fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation> {
        // the first user message is the question itself
        let retrieved = req
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .skip(1)
            .any(|m| is_retrieval(&m.content));
        let key = context_for(req.mode, req.question_id, retrieved);
        let entries = self.entries(&key)?;
        let logits = self.logits(&key)?;
        let idx = if req.params.is_greedy() {
            argmax(&logits)
        } else {
            let probs = nucleus(softmax(logits.iter().copied(), req.params.temperature), req.params.top_p);
            let s = SeedMixer::new(req.params.seed)
                .str(req.mode.as_str())
                .str(req.question_id)
                .int(req.turn as u64)
                .finish();
            sample_index(&probs, seed::rng(s).random::<f64>())
        };
        let entry = &entries[idx];
        let text = match &entry.action {
            ToyAction::Emit(s) => s.clone(),
            ToyAction::AnswerFromLastDocs => {
                let ans = last_doc_title(req.messages).unwrap_or_else(|| "unknown".to_string());
                format!("<answer>{ans}</answer>")
            }
        };
        Ok(Generation {
            text,
            action_token: Some(entry.token.clone()),
            logprob: Some(log_softmax(&logits)[idx]),
        })
    }

    /// Flat checkpoint: one `mode<TAB>question_id<TAB>token<TAB>logit` line per
    /// parameter, in key order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# mode\tquestion_id\ttoken\tlogit\n");
        for (key, entries) in &self.contexts {
            for e in entries {
                out.push_str(&format!("{}\t{}\t{}\t{:?}\n", key.mode, key.question_id, e.token, e.logit));
            }
        }
        out
    }

    /// Overwrites logits from a checkpoint produced by [`to_tsv`](Self::to_tsv).
    /// Every line must name an existing context and token.
    pub fn load_tsv(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut updates = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let mode: PromptMode = fields[0].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let logit: f64 = fields[3]
                .parse()
                .map_err(|_| parse_err(format!("bad logit `{}`", fields[3])))?;
            if !logit.is_finite() {
                return Err(parse_err("non-finite logit".into()));
            }
            let key = ContextKey::new(mode, fields[1]);
            let i = self.position(&key, fields[2])?;
            updates.push((key, i, logit));
        }
        for (key, i, logit) in updates {
            self.contexts.get_mut(&key).expect("checked")[i].logit = logit;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_tsv(&text, path)
    }
}

fn theta_key(key: &ContextKey, token: &str) -> ThetaKey {
    ThetaKey {
        context: key.clone(),
        token: token.to_string(),
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn softmax(logits: impl Iterator<Item = f64>, temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.map(|l| l / temperature).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Keeps the smallest high-probability prefix whose mass reaches `top_p`,
/// zeroing the rest and renormalizing.
fn nucleus(probs: Vec<f64>, top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for i in order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter().map(|p| p / mass).collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn last_doc_title(messages: &[Message]) -> Option<String> {
    messages
        .iter()
        .rev()
        .filter(|m| m.role == Role::User)
        .find(|m| extract_tag(&m.content, Tag::Information).is_some())
        .and_then(|m| information_titles(&m.content).into_iter().next())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{GenParams, PolicyHandle};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_action(l0: f64, l1: f64) -> (ToySoftmaxPolicy, ContextKey) {
        let key = ContextKey::new(PromptMode::Decision, "q");
        let mut p = ToySoftmaxPolicy::new();
        p.insert_context(
            key.clone(),
            vec![
                ("yes".into(), ToyAction::Emit("<assessment>yes</assessment>".into()), l0),
                ("no".into(), ToyAction::Emit("<assessment>no</assessment>".into()), l1),
            ],
        );
        (p, key)
    }

    fn gen(p: &ToySoftmaxPolicy, params: &GenParams, turn: usize) -> Generation {
        let msgs = [Message::system("s"), Message::user("Question: x")];
        p.generate(&GenerateRequest {
            messages: &msgs,
            mode: PromptMode::Decision,
            question_id: "q",
            turn,
            params,
        })
        .unwrap()
    }

    #[test]
    fn equal_logits() {
        let (p, key) = two_action(0.0, 0.0);
        let (lp, grad) = p.action_logprob_and_grad(&key, "yes").unwrap();
        assert_abs_diff_eq!(lp, 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(grad[&theta_key(&key, "yes")], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[&theta_key(&key, "no")], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn logprob_two_zero() {
        let (p, key) = two_action(2.0, 0.0);
        let (lp, _) = p.action_logprob_and_grad(&key, "yes").unwrap();
        assert_abs_diff_eq!(lp, -(1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lp, -0.1269, epsilon = 1e-4);
    }

    #[test]
    fn saturated_logits_render_yes() {
        let (p, key) = two_action(50.0, 0.0);
        assert!(p.prob(&key, "yes").unwrap() >= 1.0 - 1e-10);
        for s in 0..200 {
            assert_eq!(gen(&p, &GenParams::rollout(s), 0).text, "<assessment>yes</assessment>");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (p, _) = two_action(0.0, 0.0);
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..64 {
            let params = GenParams::rollout(s);
            let a = gen(&p, &params, 0);
            assert_eq!(a, gen(&p, &params, 0));
            seen.insert(a.action_token.unwrap());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn top_p_truncates_tail() {
        let (p, _) = two_action(3.0, 0.0);
        let params = GenParams {
            top_p: 0.5,
            ..GenParams::rollout(0)
        };
        for s in 0..200 {
            assert_eq!(gen(&p, &params.with_seed(s), 0).action_token.as_deref(), Some("yes"));
        }
        let kept = nucleus(vec![0.2, 0.5, 0.3], 0.6);
        assert_eq!(kept[0], 0.0);
        assert_abs_diff_eq!(kept[1], 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(kept[2], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn unknown_context_and_action() {
        let (p, key) = two_action(0.0, 0.0);
        assert!(matches!(
            p.action_logprob_and_grad(&ContextKey::new(PromptMode::Param, "q"), "yes"),
            Err(Error::UnknownContext(_))
        ));
        assert!(matches!(
            p.action_logprob_and_grad(&key, "maybe"),
            Err(Error::UnknownAction { .. })
        ));
    }

    #[test]
    fn snapshot_is_independent() {
        let (p, key) = two_action(0.3, -0.2);
        let mut live = PolicyHandle::toy(p);
        let snap = live.as_toy().unwrap().snapshot_reference();
        let frozen = live.clone();
        assert_eq!(live.as_toy().unwrap().kl(&snap, &key).unwrap(), 0.0);
        let mut delta = ThetaGrad::new();
        delta.insert(theta_key(&key, "yes"), 1.0);
        live.toy_mut().unwrap().apply_update(&delta, 1.0).unwrap();
        assert_abs_diff_eq!(snap.logit(&key, "yes").unwrap(), 0.3);
        assert_abs_diff_eq!(frozen.as_toy().unwrap().logit(&key, "yes").unwrap(), 0.3);
        assert_abs_diff_eq!(live.as_toy().unwrap().logit(&key, "yes").unwrap(), 1.3);
        assert!(live.as_toy().unwrap().kl(&snap, &key).unwrap() > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = crate::toydata::tiny_dataset();
        let mut p = ToySoftmaxPolicy::for_dataset(&ds);
        let key = ContextKey::new(PromptMode::Param, &ds[0].id);
        p.set_logit(&key, "gold", 0.1 + 0.2).unwrap();
        let text = p.to_tsv();
        let mut q = ToySoftmaxPolicy::for_dataset(&ds);
        q.load_tsv(&text, Path::new("ckpt.tsv")).unwrap();
        assert_eq!(p, q);

        let bad = "param\tnope\tgold\t1.0\n";
        assert!(q.load_tsv(bad, Path::new("x")).is_err());
        let err = q.load_tsv("param\tq\n", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn for_dataset_vocabularies() {
        let ds = crate::toydata::tiny_dataset();
        let p = ToySoftmaxPolicy::for_dataset(&ds);
        // param, decision, and search before and after retrieval
        assert_eq!(p.num_contexts(), 4 * ds.len());
        assert!(p.tokens(&context_for(PromptMode::Search, &ds[1].id, true)).is_ok());
        let k = ContextKey::new(PromptMode::Param, &ds[0].id);
        assert_eq!(p.tokens(&k).unwrap(), PARAM_TOKENS.to_vec());
        let greedy = GenParams::greedy(0);
        let msgs = [Message::system("s"), Message::user("Question: x")];
        let g = p
            .generate(&GenerateRequest {
                messages: &msgs,
                mode: PromptMode::Param,
                question_id: &ds[0].id,
                turn: 0,
                params: &greedy,
            })
            .unwrap();
        assert_eq!(g.text, format!("<answer>{}</answer>", ds[0].golds.first()));
    }

    #[test]
    fn search_turns_after_retrieval_use_their_own_context() {
        let ds = crate::toydata::tiny_dataset();
        let mut p = ToySoftmaxPolicy::for_dataset(&ds);
        p.set_logit(&context_for(PromptMode::Search, "t2", false), "search", 30.0).unwrap();
        p.set_logit(&context_for(PromptMode::Search, "t2", true), "answer", 30.0).unwrap();
        let greedy = GenParams::greedy(0);
        let first = [Message::system("s"), Message::user("Question: x")];
        let req = |messages| GenerateRequest {
            messages,
            mode: PromptMode::Search,
            question_id: "t2",
            turn: 0,
            params: &greedy,
        };
        assert!(p.generate(&req(&first)).unwrap().text.starts_with("<search>"));
        let after = [
            Message::system("s"),
            Message::user("Question: x"),
            Message::assistant("<search>x</search>"),
            Message::user("<information>\nDoc 1: \"Bardney\"\na village\n</information>"),
        ];
        assert_eq!(p.generate(&req(&after)).unwrap().text, "<answer>Bardney</answer>");
    }

    #[test]
    fn answer_from_last_docs() {
        let msgs = [
            Message::system("s"),
            Message::user("Question: x"),
            Message::assistant("<search>x</search>"),
            Message::user("<information>\nDoc 1: \"Bardney\"\ntext\n</information>"),
        ];
        assert_eq!(last_doc_title(&msgs).as_deref(), Some("Bardney"));
        assert_eq!(last_doc_title(&msgs[..2]), None);
    }

    fn random_policy(logits: &[f64]) -> (ToySoftmaxPolicy, ContextKey) {
        let key = ContextKey::new(PromptMode::Param, "q");
        let mut p = ToySoftmaxPolicy::new();
        p.insert_context(
            key.clone(),
            logits
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("a{i}"), ToyAction::Emit(format!("<answer>{i}</answer>")), *l))
                .collect(),
        );
        (p, key)
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let (p, key) = random_policy(&logits);
            let s: f64 = p.probs(&key).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(
            logits in prop::collection::vec(-5.0f64..5.0, 2..6),
            pick in 0usize..6,
        ) {
            let (p, key) = random_policy(&logits);
            let token = format!("a{}", pick % logits.len());
            let (_, grad) = p.action_logprob_and_grad(&key, &token).unwrap();
            let h = 1e-4;
            let mut total = 0.0;
            for (j, &l) in logits.iter().enumerate() {
                let tj = format!("a{j}");
                let mut plus = p.clone();
                plus.set_logit(&key, &tj, l + h).unwrap();
                let mut minus = p.clone();
                minus.set_logit(&key, &tj, l - h).unwrap();
                let fd = (plus.logprob(&key, &token).unwrap() - minus.logprob(&key, &token).unwrap()) / (2.0 * h);
                let g = grad[&theta_key(&key, &tj)];
                prop_assert!((g - fd).abs() <= 1e-6, "entry {j}: {g} vs {fd}");
                total += g;
            }
            prop_assert!(total.abs() <= 1e-12);
        }

        #[test]
        fn kl_is_nonnegative_and_grad_matches(
            a in prop::collection::vec(-4.0f64..4.0, 3),
            b in prop::collection::vec(-4.0f64..4.0, 3),
        ) {
            let (p, key) = random_policy(&a);
            let (q, _) = random_policy(&b);
            prop_assert!(p.kl(&q, &key).unwrap() >= 0.0);
            let grad = p.kl_grad(&q, &key).unwrap();
            let h = 1e-5;
            for (j, aj) in a.iter().enumerate() {
                let tj = format!("a{j}");
                let mut plus = p.clone();
                plus.set_logit(&key, &tj, aj + h).unwrap();
                let mut minus = p.clone();
                minus.set_logit(&key, &tj, aj - h).unwrap();
                let fd = (plus.kl(&q, &key).unwrap() - minus.kl(&q, &key).unwrap()) / (2.0 * h);
                prop_assert!((grad[&theta_key(&key, &tj)] - fd).abs() <= 1e-6);
            }
        }
    }
}
