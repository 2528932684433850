//! Dialogue corpora and classifier context windows.
//!
//! A corpus file is UTF-8 with one JSON record per line:
//!
//! ```text
//! {"dialogue_id":"d01","turn_index":0,"speaker":"A","text":"hi all","intent":"greet"}
//! ```
//!
//! Dialogues keep the order in which their first record appears in the file;
//! utterances inside a dialogue are sorted by `turn_index`, which must run
//! contiguously from 0. Blank lines are ignored.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_OOS_TOKEN: &str = "UNK";
pub const DEFAULT_TURN_SHIFT_TOKEN: &str = "<ts>";
pub const DEFAULT_HISTORY: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown intent label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate record for dialogue {dialogue_id:?} turn {turn_index}")]
    DuplicateTurn {
        line: usize,
        dialogue_id: String,
        turn_index: usize,
    },
    #[error("line {line}: {message}")]
    InvalidText { line: usize, message: String },
    #[error("dialogue {dialogue_id:?}: turn indices are not contiguous from 0 (missing turn {missing})")]
    GappedDialogue { dialogue_id: String, missing: usize },
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("turn index {turn_index} out of range for dialogue {dialogue_id:?} with {len} turns")]
    TurnOutOfRange {
        dialogue_id: String,
        turn_index: usize,
        len: usize,
    },
}

/// The in-scope intents plus the reserved out-of-scope label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    in_scope: Vec<String>,
    oos_token: String,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new<I, S>(in_scope: I, oos_token: impl Into<String>) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let in_scope: Vec<String> = in_scope.into_iter().map(Into::into).collect();
        let oos_token = oos_token.into();
        if in_scope.is_empty() {
            return Err(CorpusError::LabelSpace("at least one in-scope label is required".into()));
        }
        check_label(&oos_token)?;
        let mut index = HashMap::with_capacity(in_scope.len());
        for (i, label) in in_scope.iter().enumerate() {
            check_label(label)?;
            if *label == oos_token {
                return Err(CorpusError::LabelSpace(format!(
                    "out-of-scope token {oos_token:?} listed as an in-scope label"
                )));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(CorpusError::LabelSpace(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self {
            in_scope,
            oos_token,
            index,
        })
    }

    /// Label space with the default `UNK` out-of-scope token.
    pub fn with_default_oos<I, S>(in_scope: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(in_scope, DEFAULT_OOS_TOKEN)
    }

    /// Reads one label per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: impl AsRef<Path>, oos_token: &str) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        Self::new(labels, oos_token)
    }

    pub fn in_scope(&self) -> &[String] {
        &self.in_scope
    }

    pub fn oos_token(&self) -> &str {
        &self.oos_token
    }

    /// Number of in-scope intents.
    pub fn m(&self) -> usize {
        self.in_scope.len()
    }

    /// In-scope labels followed by the out-of-scope token.
    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.in_scope
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.oos_token.as_str()))
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn is_in_scope(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn is_oos(&self, label: &str) -> bool {
        label == self.oos_token
    }

    pub fn contains(&self, label: &str) -> bool {
        self.is_in_scope(label) || self.is_oos(label)
    }
}

// Labels are rendered comma-separated on one prompt line.
fn check_label(label: &str) -> Result<(), CorpusError> {
    if label.trim().is_empty() {
        return Err(CorpusError::LabelSpace("labels must be non-empty".into()));
    }
    if label.trim() != label || label.contains([',', '\n', '\r']) {
        return Err(CorpusError::LabelSpace(format!(
            "label {label:?} may not contain commas, line breaks or surrounding whitespace"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceKey {
    pub dialogue_id: String,
    pub turn_index: usize,
}

impl UtteranceKey {
    pub fn new(dialogue_id: impl Into<String>, turn_index: usize) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
        }
    }
}

impl fmt::Display for UtteranceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dialogue_id, self.turn_index)
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker: String,
    pub text: String,
    pub intent: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker: String,
    pub text: String,
    pub gold_intent: String,
}

impl Utterance {
    pub fn key(&self) -> UtteranceKey {
        UtteranceKey::new(self.dialogue_id.clone(), self.turn_index)
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            dialogue_id: self.dialogue_id.clone(),
            turn_index: self.turn_index,
            speaker: self.speaker.clone(),
            text: self.text.clone(),
            intent: self.gold_intent.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Up to `h` utterances immediately preceding `turn_index`, oldest first.
    pub fn context(&self, turn_index: usize, h: usize) -> Result<ContextWindow<'_>, CorpusError> {
        build_context(self, turn_index, h)
    }
}

/// A target utterance with the turns that precede it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow<'a> {
    pub target: &'a Utterance,
    pub history: &'a [Utterance],
}

impl ContextWindow<'_> {
    pub fn history_texts(&self) -> Vec<String> {
        self.history.iter().map(|u| u.text.clone()).collect()
    }
}

/// A loaded corpus: dialogues in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    /// Every utterance in corpus order (dialogue order, then turn order).
    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.dialogues.iter().flat_map(|d| d.utterances.iter())
    }

    /// Every context window in corpus order.
    pub fn windows(&self, h: usize) -> impl Iterator<Item = ContextWindow<'_>> {
        self.dialogues.iter().flat_map(move |d| {
            (0..d.len()).map(move |i| build_context(d, i, h).expect("index in range"))
        })
    }

    pub fn to_records(&self) -> Vec<CorpusRecord> {
        self.utterances().map(Utterance::to_record).collect()
    }

    /// Writes the corpus back out in the line-delimited format.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in self.to_records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>, label_space: &LabelSpace) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, label_space)
}

pub fn parse_corpus(text: &str, label_space: &LabelSpace) -> Result<Corpus, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(usize, Utterance)>> = HashMap::new();
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !label_space.contains(&record.intent) {
            return Err(CorpusError::UnknownLabel {
                line,
                label: record.intent,
            });
        }
        check_text(&record.text).map_err(|message| CorpusError::InvalidText { line, message })?;
        if !seen.insert((record.dialogue_id.clone(), record.turn_index)) {
            return Err(CorpusError::DuplicateTurn {
                line,
                dialogue_id: record.dialogue_id,
                turn_index: record.turn_index,
            });
        }
        let utterance = Utterance {
            dialogue_id: record.dialogue_id,
            turn_index: record.turn_index,
            speaker: record.speaker,
            text: record.text,
            gold_intent: record.intent,
        };
        let bucket = grouped.entry(utterance.dialogue_id.clone()).or_insert_with(|| {
            order.push(utterance.dialogue_id.clone());
            Vec::new()
        });
        bucket.push((line, utterance));
    }

    let mut dialogues = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = grouped.remove(&id).unwrap_or_default();
        rows.sort_by_key(|(_, u)| u.turn_index);
        for (expected, (_, u)) in rows.iter().enumerate() {
            if u.turn_index != expected {
                return Err(CorpusError::GappedDialogue {
                    dialogue_id: id,
                    missing: expected,
                });
            }
        }
        dialogues.push(Dialogue {
            id,
            utterances: rows.into_iter().map(|(_, u)| u).collect(),
        });
    }
    Ok(Corpus { dialogues })
}

// Utterances are single-line: prompts render one utterance per bullet.
fn check_text(text: &str) -> Result<(), String> {
    if text.trim().is_empty() {
        return Err("utterance text is empty".into());
    }
    if text.contains(['\n', '\r']) {
        return Err("utterance text contains a line break".into());
    }
    Ok(())
}

pub fn build_context(dialogue: &Dialogue, turn_index: usize, h: usize) -> Result<ContextWindow<'_>, CorpusError> {
    if turn_index >= dialogue.len() {
        return Err(CorpusError::TurnOutOfRange {
            dialogue_id: dialogue.id.clone(),
            turn_index,
            len: dialogue.len(),
        });
    }
    let start = turn_index.saturating_sub(h);
    Ok(ContextWindow {
        target: &dialogue.utterances[turn_index],
        history: &dialogue.utterances[start..turn_index],
    })
}

/// Joins history and target with the turn-shift token, oldest first.
pub fn render_classifier_input(window: &ContextWindow<'_>, ts_token: &str) -> String {
    debug_assert!(!ts_token.is_empty());
    let separator = format!(" {ts_token} ");
    window
        .history
        .iter()
        .chain(std::iter::once(window.target))
        .map(|u| u.text.as_str())
        .collect::<Vec<_>>()
        .join(&separator)
}
