//! Zero-shot classification prompt and reply parsing.
//!
//! The template lives in `templates/intent_prompt.txt`. Placeholders are
//! written `{{name}}`:
//!
//! | placeholder     | rendered as                                           |
//! |-----------------|-------------------------------------------------------|
//! | `{{labels}}`    | offered in-scope labels joined with `", "`            |
//! | `{{oos_token}}` | the out-of-scope label (appears twice)                |
//! | `{{history}}`   | one `"- <utterance>\n"` line per preceding turn       |
//! | `{{utterance}}` | the utterance to classify                             |
//!
//! Substitution is single-pass: placeholder-like text inside a value is
//! emitted verbatim.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ContextWindow, LabelSpace};
use crate::lsr::ReducedLabelSet;

pub const PROMPT_TEMPLATE: &str = include_str!("../templates/intent_prompt.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt offers no labels")]
    NoLabels,
    #[error("{field} contains a line break")]
    LineBreak { field: &'static str },
    #[error("text does not follow the prompt template (at {0})")]
    TemplateMismatch(String),
    #[error("unknown placeholder {{{{{0}}}}} in template")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub labels: Vec<String>,
    pub oos_token: String,
    pub history_lines: Vec<String>,
    pub utterance: String,
}

impl PromptSpec {
    /// Prompt for a window offering every in-scope label.
    pub fn full(window: &ContextWindow<'_>, label_space: &LabelSpace) -> Self {
        Self::with_labels(window, label_space.in_scope().to_vec(), label_space)
    }

    /// Prompt for a window offering only the reduced set.
    pub fn reduced(window: &ContextWindow<'_>, set: &ReducedLabelSet, label_space: &LabelSpace) -> Self {
        Self::with_labels(window, set.labels.clone(), label_space)
    }

    pub fn with_labels(window: &ContextWindow<'_>, labels: Vec<String>, label_space: &LabelSpace) -> Self {
        Self {
            labels,
            oos_token: label_space.oos_token().to_string(),
            history_lines: window.history_texts(),
            utterance: window.target.text.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.labels.is_empty() {
            return Err(PromptError::NoLabels);
        }
        let single_line = |s: &str| !s.contains(['\n', '\r']);
        if !self.labels.iter().all(|l| single_line(l)) {
            return Err(PromptError::LineBreak { field: "labels" });
        }
        if !single_line(&self.oos_token) {
            return Err(PromptError::LineBreak { field: "oos_token" });
        }
        if !self.history_lines.iter().all(|l| single_line(l)) {
            return Err(PromptError::LineBreak { field: "history" });
        }
        if !single_line(&self.utterance) {
            return Err(PromptError::LineBreak { field: "utterance" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Labels,
    OosToken,
    History,
    Utterance,
}

#[derive(Debug, Clone, Copy)]
enum Piece<'t> {
    Literal(&'t str),
    Slot(Slot),
}

fn pieces(template: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else {
            break;
        };
        let name = &rest[start + 2..start + 2 + len];
        let slot = match name {
            "labels" => Slot::Labels,
            "oos_token" => Slot::OosToken,
            "history" => Slot::History,
            "utterance" => Slot::Utterance,
            other => return Err(PromptError::UnknownPlaceholder(other.to_string())),
        };
        if start > 0 {
            out.push(Piece::Literal(&rest[..start]));
        }
        out.push(Piece::Slot(slot));
        rest = &rest[start + 2 + len + 2..];
    }
    if !rest.is_empty() {
        out.push(Piece::Literal(rest));
    }
    Ok(out)
}

fn template_pieces() -> Vec<Piece<'static>> {
    pieces(PROMPT_TEMPLATE).expect("bundled template is well-formed")
}

pub fn render_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    spec.validate()?;
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + 256);
    for piece in template_pieces() {
        match piece {
            Piece::Literal(text) => out.push_str(text),
            Piece::Slot(Slot::Labels) => out.push_str(&spec.labels.join(", ")),
            Piece::Slot(Slot::OosToken) => out.push_str(&spec.oos_token),
            Piece::Slot(Slot::History) => {
                for line in &spec.history_lines {
                    out.push_str("- ");
                    out.push_str(line);
                    out.push('\n');
                }
            }
            Piece::Slot(Slot::Utterance) => out.push_str(&spec.utterance),
        }
    }
    Ok(out)
}

/// Recovers the slot values from a prompt rendered by [`render_prompt`].
pub fn parse_prompt(prompt: &str) -> Result<PromptSpec, PromptError> {
    let pieces = template_pieces();
    let mut rest = prompt;
    let mut values: Vec<(Slot, &str)> = Vec::new();
    let mut pending: Option<Slot> = None;
    for piece in &pieces {
        match piece {
            Piece::Slot(slot) => pending = Some(*slot),
            Piece::Literal(lit) => match pending.take() {
                None => {
                    rest = rest
                        .strip_prefix(lit)
                        .ok_or_else(|| PromptError::TemplateMismatch(excerpt(lit)))?;
                }
                Some(slot) => {
                    // Slot values are single-line except history, and no literal
                    // begins inside a value, so the first match ends the value.
                    let at = rest.find(lit).ok_or_else(|| PromptError::TemplateMismatch(excerpt(lit)))?;
                    values.push((slot, &rest[..at]));
                    rest = &rest[at + lit.len()..];
                }
            },
        }
    }
    if let Some(slot) = pending {
        values.push((slot, rest));
    } else if !rest.is_empty() {
        return Err(PromptError::TemplateMismatch("trailing text".into()));
    }

    let mut spec = PromptSpec {
        labels: Vec::new(),
        oos_token: String::new(),
        history_lines: Vec::new(),
        utterance: String::new(),
    };
    let mut oos_seen: Option<&str> = None;
    for (slot, value) in values {
        match slot {
            Slot::Labels => spec.labels = value.split(", ").map(str::to_string).collect(),
            Slot::OosToken => {
                if oos_seen.is_some_and(|seen| seen != value) {
                    return Err(PromptError::TemplateMismatch("out-of-domain label".into()));
                }
                oos_seen = Some(value);
                spec.oos_token = value.to_string();
            }
            Slot::History => {
                spec.history_lines = value
                    .split_terminator('\n')
                    .map(|l| {
                        l.strip_prefix("- ")
                            .map(str::to_string)
                            .ok_or_else(|| PromptError::TemplateMismatch("history line".into()))
                    })
                    .collect::<Result<_, _>>()?;
            }
            Slot::Utterance => spec.utterance = value.to_string(),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn excerpt(s: &str) -> String {
    let line = s.trim().lines().next().unwrap_or("");
    line.chars().take(40).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    /// No JSON object anywhere in the reply.
    NoJson,
    /// JSON present but no object carries a string `intent` field.
    MissingIntent,
    /// The `intent` value was neither offered nor the out-of-scope token.
    NotOffered,
}

/// A parsed LLM reply. `parsed_label` is `None` exactly when parsing failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmVerdict {
    pub raw_text: String,
    pub parsed_label: Option<String>,
    pub failure: Option<ParseFailure>,
}

impl LlmVerdict {
    pub fn parse_ok(&self) -> bool {
        self.parsed_label.is_some()
    }
}

/// Top-level JSON objects in `raw`, in order of appearance.
fn json_objects(raw: &str) -> Vec<serde_json::Map<String, serde_json::Value>> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(offset) = raw[pos..].find('{') {
        let start = pos + offset;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(serde_json::Value::Object(map))) => {
                found.push(map);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    found
}

/// Reads the `intent` field of the last JSON object in the reply that has
/// one. Code fences and surrounding prose are skipped; reasoning models put
/// their final answer last.
pub fn parse_verdict(raw: &str, offered: &[String], oos_token: &str) -> LlmVerdict {
    let objects = json_objects(raw);
    let failed = |failure| LlmVerdict {
        raw_text: raw.to_string(),
        parsed_label: None,
        failure: Some(failure),
    };
    if objects.is_empty() {
        return failed(ParseFailure::NoJson);
    }
    let Some(intent) = objects
        .iter()
        .rev()
        .find_map(|obj| obj.get("intent").and_then(serde_json::Value::as_str))
    else {
        return failed(ParseFailure::MissingIntent);
    };
    let intent = intent.trim();
    if intent == oos_token || offered.iter().any(|l| l == intent) {
        LlmVerdict {
            raw_text: raw.to_string(),
            parsed_label: Some(intent.to_string()),
            failure: None,
        }
    } else {
        failed(ParseFailure::NotOffered)
    }
}

/// The reply a well-behaved model gives for `label`.
pub fn format_reply(label: &str) -> String {
    serde_json::json!({ "intent": label }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offered() -> Vec<String> {
        vec!["greet".into(), "ask".into()]
    }

    fn spec(history: &[&str]) -> PromptSpec {
        PromptSpec {
            labels: vec!["a".into(), "b".into()],
            oos_token: "UNK".into(),
            history_lines: history.iter().map(|s| s.to_string()).collect(),
            utterance: "what now?".into(),
        }
    }

    #[test]
    fn template_has_every_section() {
        for header in [
            "**Task description**",
            "**Authorized categories**",
            "**Out-of-domain label**",
            "**Previous utterances in the dialogue**",
            "**Expected output format**",
            "**Task**",
        ] {
            assert!(PROMPT_TEMPLATE.contains(header), "{header}");
        }
        assert!(PROMPT_TEMPLATE.ends_with("Result:"));
    }

    #[test]
    fn empty_history_keeps_section() {
        let text = render_prompt(&spec(&[])).unwrap();
        assert!(text.contains("**Previous utterances in the dialogue**"));
        assert!(!text.lines().any(|l| l.starts_with("- ") && l != "- UNK"));
        assert!(text.contains("starts by \"-\":\n\n**Expected output format**"));
    }

    #[test]
    fn reduced_projection() {
        let text = render_prompt(&spec(&["x"])).unwrap();
        assert!(text.contains("The supported intents are:\na, b\n"));
        assert!(text.contains("**Out-of-domain label**\n- UNK\n"));
        assert!(text.contains("otherwise return UNK."));
    }

    #[test]
    fn placeholder_text_is_not_expanded() {
        let mut s = spec(&["{{labels}}"]);
        s.utterance = "{{history}}".into();
        let text = render_prompt(&s).unwrap();
        assert!(text.contains("- {{labels}}\n"));
        assert_eq!(parse_prompt(&text).unwrap(), s);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(&[]);
        s.labels.clear();
        assert_eq!(render_prompt(&s), Err(PromptError::NoLabels));
        let mut s = spec(&["two\nlines"]);
        assert!(matches!(render_prompt(&s), Err(PromptError::LineBreak { .. })));
        s.history_lines.clear();
        s.utterance = "a\rb".into();
        assert!(render_prompt(&s).is_err());
    }

    #[test]
    fn parse_prompt_rejects_foreign_text() {
        assert!(parse_prompt("hello").is_err());
        let text = render_prompt(&spec(&["x"])).unwrap() + " extra";
        assert!(matches!(parse_prompt(&text), Err(PromptError::TemplateMismatch(_))));
    }

    #[test]
    fn plain_reply() {
        let v = parse_verdict(r#"{"intent": "greet"}"#, &offered(), "UNK");
        assert_eq!(v.parsed_label.as_deref(), Some("greet"));
        assert!(v.parse_ok());
    }

    #[test]
    fn fenced_reply() {
        let v = parse_verdict("```json\n{\"intent\": \"UNK\"}\n```", &offered(), "UNK");
        assert_eq!(v.parsed_label.as_deref(), Some("UNK"));
    }

    #[test]
    fn prose_reply_fails() {
        let v = parse_verdict("The intent is greet.", &offered(), "UNK");
        assert!(!v.parse_ok());
        assert_eq!(v.failure, Some(ParseFailure::NoJson));
    }

    #[test]
    fn unoffered_label_is_failure() {
        let v = parse_verdict(r#"{"intent": "thank"}"#, &offered(), "UNK");
        assert_eq!(v.failure, Some(ParseFailure::NotOffered));
        let v = parse_verdict(r#"{"label": "greet"}"#, &offered(), "UNK");
        assert_eq!(v.failure, Some(ParseFailure::MissingIntent));
        let v = parse_verdict(r#"{"intent": 3}"#, &offered(), "UNK");
        assert_eq!(v.failure, Some(ParseFailure::MissingIntent));
    }

    #[test]
    fn last_object_wins() {
        let raw = "<think>maybe {\"intent\": \"greet\"}? no.</think>\n{\"intent\": \"ask\"}";
        assert_eq!(parse_verdict(raw, &offered(), "UNK").parsed_label.as_deref(), Some("ask"));
        let raw = "{\"intent\": \"ask\"} {\"confidence\": 0.9}";
        assert_eq!(parse_verdict(raw, &offered(), "UNK").parsed_label.as_deref(), Some("ask"));
    }

    #[test]
    fn nested_objects_are_not_top_level() {
        let raw = r#"{"answer": {"intent": "greet"}}"#;
        assert_eq!(
            parse_verdict(raw, &offered(), "UNK").failure,
            Some(ParseFailure::MissingIntent)
        );
    }

    #[test]
    fn broken_braces() {
        for raw in ["{", "}{", "{{{", "{\"intent\": \"greet\"", "{\"intent\"}"] {
            assert!(!parse_verdict(raw, &offered(), "UNK").parse_ok(), "{raw}");
        }
    }
}
