//! The 22 surface-level prompt variants, question rendering and response
//! parsing.
//!
//! A variant is a choice-list format crossed with the order in which the
//! response JSON must list its fields. Variant identity is serialized as
//! `"<choice_format>/<response_order>"`, e.g. `"upper_dot/answer_first"`.
//!
//! Variant order from [`enumerate_variants`] is fixed: choice formats in the
//! order of [`ChoiceFormat::ALL`], each followed by answer-first then
//! rationale-first. The `None` format renders the question alone with no
//! hint that an option list exists.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{fold_text, QuestionInstance};

/// Version tag of the response-format instruction resource.
pub const RESPONSE_FORMAT_VERSION: &str = "v1";
const RESPONSE_FORMAT_TEMPLATE: &str = include_str!("../templates/response_format_v1.txt");

/// Default cap on format retries per model call.
pub const DEFAULT_RETRY_CAP: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChoiceFormat {
    /// `A. text`
    UpperDot,
    /// `A) text`
    UpperParen,
    /// `(A) text`
    UpperBoth,
    /// `a. text`
    LowerDot,
    /// `a) text`
    LowerParen,
    /// `1. text`
    NumDot,
    /// `1) text`
    NumParen,
    /// `(1) text`
    NumBoth,
    /// `- text`
    Dash,
    /// `* text`
    Star,
    /// No choice list at all.
    None,
}

impl ChoiceFormat {
    pub const ALL: [ChoiceFormat; 11] = [
        ChoiceFormat::UpperDot,
        ChoiceFormat::UpperParen,
        ChoiceFormat::UpperBoth,
        ChoiceFormat::LowerDot,
        ChoiceFormat::LowerParen,
        ChoiceFormat::NumDot,
        ChoiceFormat::NumParen,
        ChoiceFormat::NumBoth,
        ChoiceFormat::Dash,
        ChoiceFormat::Star,
        ChoiceFormat::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChoiceFormat::UpperDot => "upper_dot",
            ChoiceFormat::UpperParen => "upper_paren",
            ChoiceFormat::UpperBoth => "upper_both",
            ChoiceFormat::LowerDot => "lower_dot",
            ChoiceFormat::LowerParen => "lower_paren",
            ChoiceFormat::NumDot => "num_dot",
            ChoiceFormat::NumParen => "num_paren",
            ChoiceFormat::NumBoth => "num_both",
            ChoiceFormat::Dash => "dash",
            ChoiceFormat::Star => "star",
            ChoiceFormat::None => "none",
        }
    }

    /// Whether rendered options carry a label the model can answer with.
    pub fn is_labelled(self) -> bool {
        !matches!(self, ChoiceFormat::Dash | ChoiceFormat::Star | ChoiceFormat::None)
    }

    /// Bare label of option `index`, if this format labels options.
    pub fn label(self, index: usize) -> Option<String> {
        match self {
            ChoiceFormat::UpperDot | ChoiceFormat::UpperParen | ChoiceFormat::UpperBoth => Some(letters(index)),
            ChoiceFormat::LowerDot | ChoiceFormat::LowerParen => Some(letters(index).to_lowercase()),
            ChoiceFormat::NumDot | ChoiceFormat::NumParen | ChoiceFormat::NumBoth => Some((index + 1).to_string()),
            _ => None,
        }
    }

    /// The full rendered line for option `index`, or `None` for the omitted format.
    pub fn render_line(self, index: usize, text: &str) -> Option<String> {
        let label = self.label(index);
        let line = match self {
            ChoiceFormat::UpperDot | ChoiceFormat::LowerDot | ChoiceFormat::NumDot => format!("{}. {text}", label?),
            ChoiceFormat::UpperParen | ChoiceFormat::LowerParen | ChoiceFormat::NumParen => {
                format!("{}) {text}", label?)
            }
            ChoiceFormat::UpperBoth | ChoiceFormat::NumBoth => format!("({}) {text}", label?),
            ChoiceFormat::Dash => format!("- {text}"),
            ChoiceFormat::Star => format!("* {text}"),
            ChoiceFormat::None => return None,
        };
        Some(line)
    }
}

/// Spreadsheet-style letters: A..Z, AA, AB, ...
fn letters(mut index: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (index % 26) as u8);
        if index < 26 {
            break;
        }
        index = index / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii letters")
}

impl fmt::Display for ChoiceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChoiceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChoiceFormat::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown choice format `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResponseOrder {
    AnswerFirst,
    RationaleFirst,
}

impl ResponseOrder {
    pub const ALL: [ResponseOrder; 2] = [ResponseOrder::AnswerFirst, ResponseOrder::RationaleFirst];

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseOrder::AnswerFirst => "answer_first",
            ResponseOrder::RationaleFirst => "rationale_first",
        }
    }
}

impl FromStr for ResponseOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResponseOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown response order `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptVariant {
    pub choice_format: ChoiceFormat,
    pub response_order: ResponseOrder,
}

impl PromptVariant {
    pub const fn new(choice_format: ChoiceFormat, response_order: ResponseOrder) -> Self {
        Self { choice_format, response_order }
    }

    /// The variant used throughout the conversation study.
    pub const CONVERSATION_DEFAULT: PromptVariant = PromptVariant::new(ChoiceFormat::None, ResponseOrder::RationaleFirst);
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.choice_format.as_str(), self.response_order.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (cf, order) = s.split_once('/').ok_or_else(|| format!("variant `{s}` is not format/order"))?;
        Ok(PromptVariant::new(cf.parse()?, order.parse()?))
    }
}

impl Serialize for PromptVariant {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptVariant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All 22 variants in their documented order.
pub fn enumerate_variants() -> Vec<PromptVariant> {
    ChoiceFormat::ALL
        .iter()
        .flat_map(|&cf| ResponseOrder::ALL.iter().map(move |&o| PromptVariant::new(cf, o)))
        .collect()
}

/// Context, question and (unless omitted) the formatted option list.
pub fn render_question_material(q: &QuestionInstance, choice_format: ChoiceFormat) -> String {
    let mut out = String::new();
    if !q.context.trim().is_empty() {
        out.push_str("Context: ");
        out.push_str(q.context.trim());
        out.push_str("\n\n");
    }
    out.push_str("Question: ");
    out.push_str(q.question.trim());
    if choice_format != ChoiceFormat::None {
        out.push_str("\n\nChoices:");
        for (i, c) in q.choices.iter().enumerate() {
            out.push('\n');
            out.push_str(&choice_format.render_line(i, c).expect("format renders a line"));
        }
    }
    out
}

/// The response-format instruction for a variant.
pub fn response_instruction(variant: PromptVariant) -> String {
    let answer_desc = match variant.choice_format {
        ChoiceFormat::None => "your answer, stated briefly".to_string(),
        cf if cf.is_labelled() => "the label of the choice you select".to_string(),
        _ => "the exact text of the choice you select".to_string(),
    };
    let answer = format!("\"answer\": {answer_desc}");
    let rationale = "\"rationale\": a brief explanation of your reasoning".to_string();
    let (fields, skeleton) = match variant.response_order {
        ResponseOrder::AnswerFirst => (
            format!("{answer}\n{rationale}"),
            r#"{"answer": "...", "rationale": "..."}"#,
        ),
        ResponseOrder::RationaleFirst => (
            format!("{rationale}\n{answer}"),
            r#"{"rationale": "...", "answer": "..."}"#,
        ),
    };
    RESPONSE_FORMAT_TEMPLATE
        .trim_end()
        .replace("{fields}", &fields)
        .replace("{skeleton}", skeleton)
}

/// Full single-shot prompt: question material followed by the instruction.
pub fn render_question(q: &QuestionInstance, v: PromptVariant) -> String {
    format!("{}\n\n{}", render_question_material(q, v.choice_format), response_instruction(v))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub answer_index: usize,
    pub rationale: String,
    pub raw: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetryReason {
    NoJson,
    MissingField,
    UnmatchableAnswer,
    AmbiguousAnswer,
}

/// A completion that cannot be used; the caller should re-issue the request.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unusable completion: {reason:?}")]
pub struct RetrySignal {
    pub reason: RetryReason,
}

impl From<RetryReason> for RetrySignal {
    fn from(reason: RetryReason) -> Self {
        Self { reason }
    }
}

/// First syntactically valid JSON object embedded anywhere in `raw`.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (pos, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn strip_label_decorations(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix("option ").or_else(|| s.strip_prefix("choice ")).unwrap_or(s).trim();
    let s = s.strip_prefix('(').unwrap_or(s);
    s.trim_end_matches(['.', ')', ':']).trim()
}

/// Maps an answer string onto a choice index.
///
/// Tried in order: folded exact text, option label (only for labelled
/// formats), then a unique containment match in either direction.
/// Candidates whose text is contained in another candidate's text are
/// dropped before the uniqueness check, so "the woman" resolves to "woman"
/// rather than clashing with "man".
/// `needle` occurs in `hay` on word boundaries.
fn contains_words(hay: &str, needle: &str) -> bool {
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    hay.match_indices(needle).any(|(at, _)| boundary(hay[..at].chars().next_back()) && boundary(hay[at + needle.len()..].chars().next()))
}

pub fn match_answer(answer: &str, choices: &[String], choice_format: ChoiceFormat) -> Result<usize, RetryReason> {
    let folded = fold_text(answer);
    let folded = folded.trim_end_matches('.').trim().to_string();
    if folded.is_empty() {
        return Err(RetryReason::UnmatchableAnswer);
    }
    let folded_choices: Vec<String> = choices.iter().map(|c| fold_text(c).trim_end_matches('.').trim().to_string()).collect();
    if let Some(i) = folded_choices.iter().position(|c| *c == folded) {
        return Ok(i);
    }
    if choice_format.is_labelled() {
        let bare = strip_label_decorations(&folded);
        if let Some(i) = (0..choices.len()).find(|&i| {
            choice_format.label(i).is_some_and(|l| l.to_lowercase() == bare)
        }) {
            return Ok(i);
        }
    }
    let mut candidates: Vec<usize> = folded_choices
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty() && (contains_words(&folded, c) || contains_words(c, &folded)))
        .map(|(i, _)| i)
        .collect();
    let snapshot = candidates.clone();
    candidates.retain(|&i| {
        !snapshot
            .iter()
            .any(|&j| j != i && folded_choices[j].len() > folded_choices[i].len() && contains_words(&folded_choices[j], &folded_choices[i]))
    });
    match candidates[..] {
        [i] => Ok(i),
        [] => Err(RetryReason::UnmatchableAnswer),
        _ => Err(RetryReason::AmbiguousAnswer),
    }
}

/// Parses one completion against the question it answers.
///
/// `attempts` is set to 1; the retry loop overwrites it with the real count.
pub fn parse_response(raw: &str, q: &QuestionInstance, choice_format: ChoiceFormat) -> Result<ParsedResponse, RetrySignal> {
    let obj = extract_json_object(raw).ok_or(RetryReason::NoJson)?;
    let answer = obj.get("answer").and_then(Value::as_str).ok_or(RetryReason::MissingField)?;
    let rationale = obj.get("rationale").and_then(Value::as_str).ok_or(RetryReason::MissingField)?;
    if rationale.trim().is_empty() {
        return Err(RetryReason::MissingField.into());
    }
    let answer_index = match_answer(answer, &q.choices, choice_format)?;
    Ok(ParsedResponse { answer_index, rationale: rationale.to_string(), raw: raw.to_string(), attempts: 1 })
}

/// A compliant completion choosing `answer_index`, answering by label when
/// the format has labels.
pub fn compliant_completion(q: &QuestionInstance, v: PromptVariant, answer_index: usize, rationale: &str) -> String {
    let answer = v.choice_format.label(answer_index).unwrap_or_else(|| q.choices[answer_index].clone());
    let answer = format!("\"answer\": {}", Value::String(answer));
    let rationale = format!("\"rationale\": {}", Value::String(rationale.to_string()));
    match v.response_order {
        ResponseOrder::AnswerFirst => format!("{{{answer}, {rationale}}}"),
        ResponseOrder::RationaleFirst => format!("{{{rationale}, {answer}}}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerKey, Benchmark};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn question(choices: &[&str]) -> QuestionInstance {
        QuestionInstance {
            id: "q1".into(),
            benchmark: Benchmark::DiscrimEval,
            subcategory: "explicit".into(),
            context: "Some context.".into(),
            question: "What now?".into(),
            choices: choices.iter().map(|s| s.to_string()).collect(),
            key: AnswerKey::default(),
        }
    }

    #[test]
    fn twenty_two_distinct_variants() {
        let vs = enumerate_variants();
        assert_eq!(vs.len(), 22);
        assert_eq!(vs.iter().collect::<HashSet<_>>().len(), 22);
        assert!(vs.contains(&PromptVariant::new(ChoiceFormat::None, ResponseOrder::RationaleFirst)));
        assert_eq!(vs[0].to_string(), "upper_dot/answer_first");
    }

    #[test]
    fn variant_string_round_trip() {
        for v in enumerate_variants() {
            assert_eq!(v.to_string().parse::<PromptVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<PromptVariant>().is_err());
    }

    #[test]
    fn omitted_format_shows_no_choices() {
        let q = question(&["The grandfather", "The grandson", "Unknown"]);
        let text = render_question(&q, PromptVariant::new(ChoiceFormat::None, ResponseOrder::RationaleFirst));
        assert!(text.contains("What now?"));
        assert!(!text.contains("grandson"));
        assert!(!text.contains("Choices:"));
    }

    #[test]
    fn upper_dot_lines() {
        let q = question(&["x", "y", "z"]);
        let text = render_question(&q, PromptVariant::new(ChoiceFormat::UpperDot, ResponseOrder::AnswerFirst));
        assert!(text.contains("\nA. x\nB. y\nC. z\n"));
    }

    #[test]
    fn instruction_field_order_follows_variant() {
        let a = response_instruction(PromptVariant::new(ChoiceFormat::Dash, ResponseOrder::AnswerFirst));
        let r = response_instruction(PromptVariant::new(ChoiceFormat::Dash, ResponseOrder::RationaleFirst));
        assert!(a.find("\"answer\"").unwrap() < a.find("\"rationale\"").unwrap());
        assert!(r.find("\"rationale\"").unwrap() < r.find("\"answer\"").unwrap());
    }

    #[test]
    fn letters_extend_past_z() {
        assert_eq!(letters(0), "A");
        assert_eq!(letters(25), "Z");
        assert_eq!(letters(26), "AA");
        assert_eq!(letters(27), "AB");
    }

    #[test]
    fn exact_match() {
        let q = question(&["yes", "no"]);
        let p = parse_response(r#"{"answer":"yes","rationale":"because"}"#, &q, ChoiceFormat::None).unwrap();
        assert_eq!(p.answer_index, 0);
        assert_eq!(p.attempts, 1);
    }

    #[test]
    fn embedded_json_with_label() {
        let q = question(&["red", "green", "blue"]);
        let raw = "Sure! Here is my reply:\n```json\n{\"answer\": \"B\", \"rationale\": \"green fits\"}\n```";
        let p = parse_response(raw, &q, ChoiceFormat::UpperDot).unwrap();
        assert_eq!(p.answer_index, 1);
    }

    #[test]
    fn label_not_accepted_without_labels() {
        let q = question(&["red", "green", "blue"]);
        let err = parse_response(r#"{"answer": "B", "rationale": "r"}"#, &q, ChoiceFormat::Dash).unwrap_err();
        assert_eq!(err.reason, RetryReason::UnmatchableAnswer);
    }

    #[test]
    fn ambiguous_substring() {
        let q = question(&["the teacher", "the doctor", "unknown"]);
        let err = parse_response(r#"{"answer": "the teacher or the doctor", "rationale": "r"}"#, &q, ChoiceFormat::None).unwrap_err();
        assert_eq!(err.reason, RetryReason::AmbiguousAnswer);
    }

    #[test]
    fn nested_candidate_prefers_longer_choice() {
        let q = question(&["man", "woman", "unknown"]);
        assert_eq!(match_answer("The woman.", &q.choices, ChoiceFormat::None), Ok(1));
    }

    #[test]
    fn retry_reasons() {
        let q = question(&["yes", "no"]);
        let reason = |raw: &str| parse_response(raw, &q, ChoiceFormat::None).unwrap_err().reason;
        assert_eq!(reason("no json here"), RetryReason::NoJson);
        assert_eq!(reason(r#"{"answer": "yes"}"#), RetryReason::MissingField);
        assert_eq!(reason(r#"{"answer": "yes", "rationale": "  "}"#), RetryReason::MissingField);
        assert_eq!(reason(r#"{"answer": "maybe", "rationale": "r"}"#), RetryReason::UnmatchableAnswer);
        assert_eq!(reason(r#"{"answer": 1, "rationale": "r"}"#), RetryReason::MissingField);
    }

    #[test]
    fn skips_broken_braces_before_valid_object() {
        let q = question(&["yes", "no"]);
        let raw = r#"I think {not json} then {"rationale": "r", "answer": "no"}"#;
        assert_eq!(parse_response(raw, &q, ChoiceFormat::None).unwrap().answer_index, 1);
    }

    fn arb_question() -> impl Strategy<Value = QuestionInstance> {
        prop::collection::btree_set("[a-z]{3,8}( [a-z]{3,8}){0,2}", 2..6).prop_map(|set| {
            let choices: Vec<String> = set.into_iter().collect();
            QuestionInstance {
                id: "p".into(),
                benchmark: Benchmark::DiffAware,
                subcategory: "D1".into(),
                context: "ctx".into(),
                question: "q?".into(),
                choices,
                key: AnswerKey { correct_index: Some(0), ..AnswerKey::default() },
            }
        })
    }

    proptest! {
        #[test]
        fn compliant_completion_round_trips(q in arb_question(), pick in 0usize..6, vi in 0usize..22) {
            let v = enumerate_variants()[vi];
            let idx = pick % q.choices.len();
            let folded: Vec<String> = q.choices.iter().map(|c| fold_text(c)).collect();
            // containment among choices makes text answers legitimately ambiguous
            prop_assume!(v.choice_format.is_labelled() || !folded.iter().enumerate().any(|(i, a)| folded.iter().enumerate().any(|(j, b)| i != j && b.contains(a.as_str()))));
            let raw = compliant_completion(&q, v, idx, "reasoning");
            let parsed = parse_response(&raw, &q, v.choice_format).unwrap();
            prop_assert_eq!(parsed.answer_index, idx);
        }

        #[test]
        fn render_mentions_choices_iff_listed(q in arb_question(), vi in 0usize..22) {
            let v = enumerate_variants()[vi];
            let text = render_question(&q, v);
            prop_assert!(!text.is_empty());
            let material = render_question_material(&q, v.choice_format);
            for c in &q.choices {
                let listed = material.lines().any(|l| l.ends_with(c.as_str()) && l != format!("Question: {}", q.question));
                prop_assert_eq!(listed, v.choice_format != ChoiceFormat::None);
            }
        }
    }
}
