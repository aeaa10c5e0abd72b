//! The agent's tagged output protocol.
//!
//! Policies talk to the environment through a small set of XML-like tags:
//! `<search>query</search>`, `<answer>text</answer>`,
//! `<assessment>yes|no</assessment>` and, from the environment side,
//! `<information>…</information>`. This module extracts those tags, turns a
//! single turn of model output into an [`Action`], and implements the two
//! answer verifiers (exact match and substring exact match).

use std::fmt;

use serde::{Deserialize, Serialize};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{Error, Result};
use crate::policy::PromptMode;

/// Tags recognised by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Search,
    Answer,
    Assessment,
    Information,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Search => "search",
            Tag::Answer => "answer",
            Tag::Assessment => "assessment",
            Tag::Information => "information",
        }
    }

    fn open(self) -> String {
        format!("<{}>", self.as_str())
    }

    fn close(self) -> String {
        format!("</{}>", self.as_str())
    }
}

impl std::str::FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "search" => Ok(Tag::Search),
            "answer" => Ok(Tag::Answer),
            "assessment" => Ok(Tag::Assessment),
            "information" => Ok(Tag::Information),
            other => Err(Error::Config(format!("unknown protocol tag `{other}`"))),
        }
    }
}

/// The stage-1 decision token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assessment {
    /// Parametric knowledge is sufficient; answer without search.
    Yes,
    /// Search is needed.
    No,
}

impl Assessment {
    pub fn as_str(self) -> &'static str {
        match self {
            Assessment::Yes => "yes",
            Assessment::No => "no",
        }
    }

    pub fn from_bool(no_search: bool) -> Self {
        if no_search {
            Assessment::Yes
        } else {
            Assessment::No
        }
    }

    /// Parses the token after trimming and lowercasing.
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_lowercase().as_str() {
            "yes" => Some(Assessment::Yes),
            "no" => Some(Assessment::No),
            _ => None,
        }
    }

    /// The canonical tagged rendering, e.g. `<assessment>yes</assessment>`.
    pub fn render(self) -> String {
        format!("<assessment>{}</assessment>", self.as_str())
    }
}

impl fmt::Display for Assessment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a turn could not be turned into a valid action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    /// A search tag in a parametric-knowledge trajectory.
    SearchInParam,
    /// Param mode output without a usable answer tag.
    MissingAnswer,
    /// Search mode output with neither a usable search nor answer tag.
    NoAction,
    /// Decision mode output without an assessment tag.
    MissingAssessment,
    /// An assessment tag whose content is not `yes` or `no`.
    BadAssessment,
    /// An answer tag with only whitespace inside.
    EmptyAnswer,
    /// A search tag with only whitespace inside.
    EmptyQuery,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::SearchInParam => "search-in-param",
            InvalidReason::MissingAnswer => "missing-answer",
            InvalidReason::NoAction => "no-action",
            InvalidReason::MissingAssessment => "missing-assessment",
            InvalidReason::BadAssessment => "bad-assessment",
            InvalidReason::EmptyAnswer => "empty-answer",
            InvalidReason::EmptyQuery => "empty-query",
        }
    }
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed turn of policy output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Action {
    Search(String),
    Answer(String),
    Assessment(Assessment),
    Invalid(InvalidReason),
}

impl Action {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Answer(_) | Action::Assessment(_))
    }
}

/// Which verifier decides correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VerifierKind {
    #[serde(rename = "em", alias = "EM")]
    Em,
    #[default]
    #[serde(rename = "subem", alias = "SubEM")]
    SubEm,
}

/// Non-empty list of reference answers, kept raw (unnormalized).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct GoldAnswers(Vec<String>);

impl GoldAnswers {
    pub fn new<I, S>(answers: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        if answers.is_empty() {
            return Err(Error::Validation("gold answer list is empty".into()));
        }
        if let Some(bad) = answers.iter().find(|a| normalize_answer(a).is_empty()) {
            return Err(Error::Validation(format!(
                "gold answer {bad:?} normalizes to the empty string"
            )));
        }
        Ok(Self(answers))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn first(&self) -> &str {
        &self.0[0]
    }
}

impl TryFrom<Vec<String>> for GoldAnswers {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        GoldAnswers::new(value)
    }
}

impl From<GoldAnswers> for Vec<String> {
    fn from(value: GoldAnswers) -> Self {
        value.0
    }
}

fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Lowercases, strips punctuation, drops the articles `a`/`an`/`the`, and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| !is_punctuation(*c))
        .flat_map(char::to_lowercase)
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &GoldAnswers) -> bool {
    let pred = normalize_answer(prediction);
    golds.0.iter().any(|g| normalize_answer(g) == pred)
}

/// True when some normalized gold answer occurs inside the normalized
/// prediction.
pub fn sub_exact_match(prediction: &str, golds: &GoldAnswers) -> bool {
    let pred = normalize_answer(prediction);
    if pred.is_empty() {
        return false;
    }
    golds.0.iter().any(|g| pred.contains(&normalize_answer(g)))
}

pub fn verify(kind: VerifierKind, prediction: &str, golds: &GoldAnswers) -> bool {
    match kind {
        VerifierKind::Em => exact_match(prediction, golds),
        VerifierKind::SubEm => sub_exact_match(prediction, golds),
    }
}

/// All well-formed `<tag>…</tag>` spans, left to right, with the shortest
/// closing match for each opening tag. Contents are untrimmed.
fn tag_spans(text: &str, tag: Tag) -> Vec<&str> {
    let open = tag.open();
    let close = tag.close();
    let mut spans = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(&open) {
        let after_open = &rest[start + open.len()..];
        match after_open.find(&close) {
            Some(end) => {
                spans.push(&after_open[..end]);
                rest = &after_open[end + close.len()..];
            }
            None => break,
        }
    }
    spans
}

/// Inner content of the last well-formed `<tag>…</tag>` pair, trimmed.
pub fn extract_tag(text: &str, tag: Tag) -> Option<String> {
    tag_spans(text, tag).last().map(|s| s.trim().to_string())
}

/// Maps one turn of policy output to an action under the given prompt mode.
pub fn classify_action(turn_text: &str, mode: PromptMode) -> Action {
    let answer = extract_tag(turn_text, Tag::Answer);
    let search = extract_tag(turn_text, Tag::Search);
    match mode {
        PromptMode::Search => match (answer, search) {
            (Some(a), _) if !a.is_empty() => Action::Answer(a),
            (Some(_), _) => Action::Invalid(InvalidReason::EmptyAnswer),
            (None, Some(q)) if !q.is_empty() => Action::Search(q),
            (None, Some(_)) => Action::Invalid(InvalidReason::EmptyQuery),
            (None, None) => Action::Invalid(InvalidReason::NoAction),
        },
        PromptMode::Param => {
            if search.is_some() {
                return Action::Invalid(InvalidReason::SearchInParam);
            }
            match answer {
                Some(a) if !a.is_empty() => Action::Answer(a),
                Some(_) => Action::Invalid(InvalidReason::EmptyAnswer),
                None => Action::Invalid(InvalidReason::MissingAnswer),
            }
        }
        PromptMode::Decision => match extract_tag(turn_text, Tag::Assessment) {
            Some(flag) => match Assessment::parse(&flag) {
                Some(a) => Action::Assessment(a),
                None => Action::Invalid(InvalidReason::BadAssessment),
            },
            None => Action::Invalid(InvalidReason::MissingAssessment),
        },
    }
}

/// Titles of the documents in an information block, in order.
///
/// Reads the `Doc N: "TITLE"` header lines produced by
/// [`crate::corpus::render_information_block`].
pub fn information_titles(block: &str) -> Vec<String> {
    let Some(inner) = extract_tag(block, Tag::Information) else {
        return Vec::new();
    };
    inner
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("Doc ")?;
            let (num, title) = rest.split_once(": ")?;
            num.parse::<usize>().ok()?;
            let title = title.trim();
            let title = title
                .strip_prefix('"')
                .and_then(|t| t.strip_suffix('"'))
                .unwrap_or(title);
            Some(title.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(items: &[&str]) -> GoldAnswers {
        GoldAnswers::new(items.iter().copied()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Beatles!"), "beatles");
        assert_eq!(normalize_answer("Christian Louboutin"), "christian louboutin");
        assert_eq!(normalize_answer("  An  Apple "), "apple");
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn normalization_uses_unicode_punctuation() {
        assert_eq!(normalize_answer("«Röntgen»—¿sí?"), "röntgensí");
        assert_eq!(normalize_answer("A THEORY"), "theory");
        // articles only as whole words
        assert_eq!(normalize_answer("Theatre an"), "theatre");
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("Bardney", &golds(&["Bardney"])));
        assert!(exact_match("the Bardney", &golds(&["Bardney"])));
        assert!(!exact_match("Bardney village", &golds(&["Bardney"])));
        assert!(exact_match("x", &golds(&["y", "X."])));
    }

    #[test]
    fn sub_exact_match_examples() {
        assert!(sub_exact_match("Bardney village", &golds(&["Bardney"])));
        assert!(!sub_exact_match("Bardney", &golds(&["Bardney village"])));
        assert!(!sub_exact_match("", &golds(&["x"])));
    }

    #[test]
    fn gold_answers_reject_empty() {
        assert!(GoldAnswers::new(Vec::<String>::new()).is_err());
        assert!(GoldAnswers::new(["The"]).is_err());
        assert!(GoldAnswers::new(["!!"]).is_err());
        let parsed: std::result::Result<GoldAnswers, _> = serde_json::from_str("[]");
        assert!(parsed.is_err());
    }

    #[test]
    fn extract_tag_examples() {
        assert_eq!(extract_tag("x <answer>42</answer> y", Tag::Answer).as_deref(), Some("42"));
        assert_eq!(
            extract_tag("<answer>a</answer><answer>b</answer>", Tag::Answer).as_deref(),
            Some("b")
        );
        assert_eq!(extract_tag("<answer>a", Tag::Answer), None);
        assert_eq!(
            extract_tag("<answer>a</answer><answer>b", Tag::Answer).as_deref(),
            Some("a")
        );
        assert_eq!(extract_tag("<search> q \n</search>", Tag::Search).as_deref(), Some("q"));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_action(
                "I will look it up <search>red soled shoes designer</search>",
                PromptMode::Search
            ),
            Action::Search("red soled shoes designer".into())
        );
        assert_eq!(
            classify_action("reasoning… <assessment>yes</assessment>", PromptMode::Decision),
            Action::Assessment(Assessment::Yes)
        );
        assert_eq!(
            classify_action("<search>q</search>", PromptMode::Param),
            Action::Invalid(InvalidReason::SearchInParam)
        );
    }

    #[test]
    fn classify_edge_cases() {
        assert_eq!(
            classify_action("<search>q</search><answer>a</answer>", PromptMode::Search),
            Action::Answer("a".into())
        );
        assert_eq!(
            classify_action("<answer>  </answer>", PromptMode::Search),
            Action::Invalid(InvalidReason::EmptyAnswer)
        );
        assert_eq!(
            classify_action("just words", PromptMode::Search),
            Action::Invalid(InvalidReason::NoAction)
        );
        assert_eq!(
            classify_action("no tags", PromptMode::Param),
            Action::Invalid(InvalidReason::MissingAnswer)
        );
        assert_eq!(
            classify_action("<assessment> NO </assessment>", PromptMode::Decision),
            Action::Assessment(Assessment::No)
        );
        assert_eq!(
            classify_action("<assessment>maybe</assessment>", PromptMode::Decision),
            Action::Invalid(InvalidReason::BadAssessment)
        );
        assert_eq!(
            classify_action("<answer>x</answer>", PromptMode::Decision),
            Action::Invalid(InvalidReason::MissingAssessment)
        );
        assert_eq!(InvalidReason::SearchInParam.to_string(), "search-in-param");
    }

    #[test]
    fn information_titles_round_trip() {
        let block = "<information>\nDoc 1: \"Bardney\"\nsome text\nDoc 2: \"Snelland\"\nmore\n</information>";
        assert_eq!(information_titles(block), vec!["Bardney", "Snelland"]);
        assert!(information_titles("nothing here").is_empty());
    }

    fn any_mode() -> impl Strategy<Value = PromptMode> {
        prop_oneof![
            Just(PromptMode::Param),
            Just(PromptMode::Search),
            Just(PromptMode::Decision)
        ]
    }

    fn protocolish() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("<answer>".to_string()),
            Just("</answer>".to_string()),
            Just("<search>".to_string()),
            Just("</search>".to_string()),
            Just("<assessment>".to_string()),
            Just("</assessment>".to_string()),
            Just("yes".to_string()),
            "[a-zA-Z .!,]{0,8}",
        ];
        prop::collection::vec(piece, 0..10).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn em_implies_subem(pred in "[a-zA-Z ,.!]{0,20}", gold in "[a-zA-Z]{1,6}( [a-zA-Z]{1,6})?") {
            if let Ok(g) = GoldAnswers::new([gold]) {
                if exact_match(&pred, &g) {
                    prop_assert!(sub_exact_match(&pred, &g));
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn extracted_content_never_contains_closing_tag(s in protocolish()) {
            for tag in [Tag::Answer, Tag::Search, Tag::Assessment] {
                if let Some(inner) = extract_tag(&s, tag) {
                    prop_assert!(!inner.contains(&tag.close()));
                }
            }
        }

        #[test]
        fn classify_is_total_and_mode_pure(s in protocolish(), mode in any_mode()) {
            let action = classify_action(&s, mode);
            match (&action, mode) {
                (Action::Search(q), PromptMode::Search) => prop_assert!(!q.trim().is_empty()),
                (Action::Search(_), _) => prop_assert!(false, "search outside search mode"),
                (Action::Answer(a), PromptMode::Param | PromptMode::Search) => prop_assert!(!a.trim().is_empty()),
                (Action::Answer(_), PromptMode::Decision) => prop_assert!(false),
                (Action::Assessment(_), PromptMode::Decision) => {}
                (Action::Assessment(_), _) => prop_assert!(false),
                (Action::Invalid(_), _) => {}
            }
        }
    }
}
