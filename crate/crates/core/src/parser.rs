//! Structured rollout parsing.
//!
//! A rollout is well formed when it is exactly one `<think>…</think>` block
//! followed by exactly one `<answer>…</answer>` block whose body is a JSON
//! object carrying an `"Attribution labels"` key. Only whitespace may
//! surround or separate the two blocks. Tags are matched as exact ASCII.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::taxonomy::{DistortionLabel, LabelRole, LabelSet};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const LABELS_KEY: &str = "Attribution labels";
pub const RATING_KEY: &str = "rating";

/// Fallback score when a rollout has no usable rating: the scale minimum.
pub const DEFAULT_FALLBACK_SCORE: f64 = 1.0;

/// Non-fatal problems found while parsing a rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// A label string outside the canonical vocabulary; the entry is dropped.
    UnknownLabel(String),
    /// A non-string entry in the label array; dropped.
    NonStringLabel(String),
    /// The answer body is not a JSON object.
    MalformedAnswer(String),
    /// `"Attribution labels"` key missing from the answer object.
    MissingLabelsKey,
    /// No `<answer>…</answer>` block at all.
    MissingAnswer,
    /// `"no issue"`/`"null"` listed next to real labels; the sentinel is dropped.
    NoIssueMixed,
    RatingNotNumeric(String),
    RatingOutOfRange(f64),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnknownLabel(s) => write!(f, "unknown label: {s:?}"),
            Diagnostic::NonStringLabel(s) => write!(f, "non-string label entry: {s}"),
            Diagnostic::MalformedAnswer(e) => write!(f, "malformed answer: {e}"),
            Diagnostic::MissingLabelsKey => write!(f, "answer lacks \"{LABELS_KEY}\""),
            Diagnostic::MissingAnswer => write!(f, "no answer block"),
            Diagnostic::NoIssueMixed => {
                write!(f, "no-issue sentinel mixed with labels; sentinel dropped")
            }
            Diagnostic::RatingNotNumeric(v) => write!(f, "rating is not numeric: {v}"),
            Diagnostic::RatingOutOfRange(r) => write!(f, "rating {r} outside [1, 5]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub think: Option<String>,
    pub labels: LabelSet,
    pub rating: Option<f64>,
    pub format_ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedResponse {
    pub fn has_unknown_labels(&self) -> bool {
        self.diagnostics
            .iter()
            .any(|d| matches!(d, Diagnostic::UnknownLabel(_)))
    }
}

/// Result of the single structural pass shared by [`check_format`] and
/// [`parse_answer`].
struct Structure<'a> {
    think: Option<&'a str>,
    answer: Option<&'a str>,
    blocks_ok: bool,
}

fn first_block<'a>(text: &'a str, open: &str, close: &str) -> Option<(usize, &'a str, usize)> {
    let start = text.find(open)?;
    let body_start = start + open.len();
    let rel_end = text[body_start..].find(close)?;
    let body_end = body_start + rel_end;
    Some((start, &text[body_start..body_end], body_end + close.len()))
}

fn scan(text: &str) -> Structure<'_> {
    let think = first_block(text, THINK_OPEN, THINK_CLOSE);
    let answer = first_block(text, ANSWER_OPEN, ANSWER_CLOSE);

    let once = |tag: &str| text.matches(tag).count() == 1;
    let blocks_ok = match (think, answer) {
        (Some((t_start, _, t_end)), Some((a_start, _, a_end))) => {
            once(THINK_OPEN)
                && once(THINK_CLOSE)
                && once(ANSWER_OPEN)
                && once(ANSWER_CLOSE)
                && t_end <= a_start
                && text[..t_start].trim().is_empty()
                && text[t_end..a_start].trim().is_empty()
                && text[a_end..].trim().is_empty()
        }
        _ => false,
    };

    Structure {
        think: think.map(|(_, body, _)| body),
        answer: answer.map(|(_, body, _)| body),
        blocks_ok,
    }
}

fn answer_object(body: &str) -> Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(body.trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(other) => Err(format!(
            "expected a JSON object, found {}",
            json_kind(&other)
        )),
        Err(e) => Err(e.to_string()),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// True iff the rollout is structurally well formed.
pub fn check_format(text: &str) -> bool {
    let s = scan(text);
    s.blocks_ok
        && s.answer
            .and_then(|body| answer_object(body).ok())
            .is_some_and(|obj| obj.contains_key(LABELS_KEY))
}

/// Parse a rollout into labels and rating. Never fails; problems are
/// recorded as diagnostics and the response stays usable.
///
/// Labels and rating are extracted from the first answer block even when the
/// rollout as a whole is malformed; `format_ok` reports the structural check.
pub fn parse_answer(text: &str) -> ParsedResponse {
    let s = scan(text);
    let mut diagnostics = Vec::new();
    let mut labels = LabelSet::clean(LabelRole::Prediction);
    let mut rating = None;
    let mut has_labels_key = false;

    match s.answer {
        None => diagnostics.push(Diagnostic::MissingAnswer),
        Some(body) => match answer_object(body) {
            Err(e) => diagnostics.push(Diagnostic::MalformedAnswer(e)),
            Ok(obj) => {
                match obj.get(LABELS_KEY) {
                    Some(v) => {
                        has_labels_key = true;
                        labels = labels_from_json(v, &mut diagnostics);
                    }
                    None => diagnostics.push(Diagnostic::MissingLabelsKey),
                }
                rating = rating_from_json(obj.get(RATING_KEY), &mut diagnostics);
            }
        },
    }

    ParsedResponse {
        think: s.think.map(str::to_string),
        labels,
        rating,
        format_ok: s.blocks_ok && has_labels_key,
        diagnostics,
    }
}

fn labels_from_json(v: &Value, diagnostics: &mut Vec<Diagnostic>) -> LabelSet {
    let entries: Vec<&Value> = match v {
        Value::Array(items) => items.iter().collect(),
        Value::Null => Vec::new(),
        other => vec![other],
    };
    let mut found = Vec::new();
    let mut saw_null = false;
    for entry in entries {
        match entry {
            Value::Null => saw_null = true,
            Value::String(s) if s.eq_ignore_ascii_case("null") => saw_null = true,
            Value::String(s) => match s.parse::<DistortionLabel>() {
                Ok(DistortionLabel::NoIssue) => saw_null = true,
                Ok(label) => found.push(label),
                Err(_) => diagnostics.push(Diagnostic::UnknownLabel(s.clone())),
            },
            other => diagnostics.push(Diagnostic::NonStringLabel(other.to_string())),
        }
    }
    if saw_null && !found.is_empty() {
        diagnostics.push(Diagnostic::NoIssueMixed);
    }
    // only distortion labels remain, so construction cannot fail
    LabelSet::prediction(found).expect("prediction set of distortion labels")
}

fn rating_from_json(v: Option<&Value>, diagnostics: &mut Vec<Diagnostic>) -> Option<f64> {
    let v = v?;
    match v.as_f64() {
        Some(r) if r.is_finite() => {
            if !(1.0..=5.0).contains(&r) {
                diagnostics.push(Diagnostic::RatingOutOfRange(r));
            }
            Some(r)
        }
        _ => {
            diagnostics.push(Diagnostic::RatingNotNumeric(v.to_string()));
            None
        }
    }
}

/// Rating clamped to `[1, 5]`, or `fallback` when absent.
pub fn effective_score(parsed: &ParsedResponse, fallback: f64) -> f64 {
    match parsed.rating {
        Some(r) => r.clamp(1.0, 5.0),
        None => fallback,
    }
}

/// Answer JSON in the canonical schema. A clean set is written as `["null"]`.
pub fn answer_json(labels: &LabelSet, rating: Option<f64>) -> String {
    let mut obj = Map::new();
    let list: Vec<Value> = if labels.is_clean() {
        vec![Value::String("null".into())]
    } else {
        labels
            .iter()
            .map(|l| Value::String(l.as_str().into()))
            .collect()
    };
    obj.insert(LABELS_KEY.to_string(), Value::Array(list));
    if let Some(r) = rating {
        obj.insert(RATING_KEY.to_string(), Value::from(r));
    }
    Value::Object(obj).to_string()
}

/// Canonical well-formed rollout text.
pub fn render_response(think: &str, labels: &LabelSet, rating: Option<f64>) -> String {
    format!(
        "{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}",
        answer_json(labels, rating)
    )
}

/// Serialize a parsed response back into canonical text.
pub fn render_parsed(parsed: &ParsedResponse) -> String {
    render_response(
        parsed.think.as_deref().unwrap_or_default(),
        &parsed.labels,
        parsed.rating,
    )
}

/// One line of parsed-rollout JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub rollout_ref: String,
    pub format_ok: bool,
    pub labels: Vec<String>,
    pub rating: Option<f64>,
    pub diagnostics: Vec<String>,
}

impl ParsedRecord {
    pub fn new(rollout_ref: impl Into<String>, parsed: &ParsedResponse) -> Self {
        Self {
            rollout_ref: rollout_ref.into(),
            format_ok: parsed.format_ok,
            labels: parsed.labels.to_strings(),
            rating: parsed.rating,
            diagnostics: parsed.diagnostics.iter().map(ToString::to_string).collect(),
        }
    }
}
