//! The four evaluated pipelines and their per-utterance decision records.
//!
//! * `bert-only`: the ensemble decides alone and abstains to the
//!   out-of-scope label when uncertain.
//! * `llm-only`: every utterance is prompted with all in-scope labels.
//! * `routed`: confident utterances keep the ensemble vote; uncertain ones go
//!   to the LLM with all in-scope labels.
//! * `routed-lsr`: as `routed`, but the prompt offers only the reduced set.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ContextWindow, Corpus, LabelSpace, UtteranceKey, DEFAULT_HISTORY};
use crate::ensemble::{decide_oos, should_route, summarize, EnsembleLog, EnsembleSummary};
use crate::llm_client::{complete_all, LlmBackend, LlmError, LlmRequest, StubLatency, StubMode, TranscriptEntry};
use crate::lsr::{reduce_label_space, LsrError, ReducedLabelSet};
use crate::prompting::{parse_verdict, render_prompt, LlmVerdict, PromptError, PromptSpec};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("no ensemble record for {0}")]
    MissingRecord(UtteranceKey),
    #[error("ensemble record for {key} has {got} labels, label space has {expected}")]
    LabelCount {
        key: UtteranceKey,
        got: usize,
        expected: usize,
    },
    #[error("{method} needs an ensemble log")]
    NeedsEnsemble { method: Method },
    #[error("{method} needs an LLM backend")]
    NeedsBackend { method: Method },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lsr(#[from] LsrError),
    #[error("line {line}: malformed decision record: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BertOnly,
    LlmOnly,
    Routed,
    RoutedLsr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BertOnly, Method::LlmOnly, Method::Routed, Method::RoutedLsr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::BertOnly => "bert-only",
            Method::LlmOnly => "llm-only",
            Method::Routed => "routed",
            Method::RoutedLsr => "routed-lsr",
        }
    }

    pub fn uses_ensemble(self) -> bool {
        self != Method::LlmOnly
    }

    pub fn uses_llm(self) -> bool {
        self != Method::BertOnly
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, Method::Routed | Method::RoutedLsr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected bert-only, llm-only, routed or routed-lsr)"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub classifier_seconds: f64,
    pub llm_seconds: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.classifier_seconds + self.llm_seconds
    }
}

/// One line of a decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub method: Method,
    pub vote_label: Option<String>,
    pub uncertainty: Option<f64>,
    pub routed: bool,
    pub offered_labels: Option<ReducedLabelSet>,
    pub final_label: String,
    pub llm_parse_ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_error: Option<String>,
    pub latency: LatencyBreakdown,
}

impl RoutingDecision {
    pub fn key(&self) -> UtteranceKey {
        UtteranceKey::new(self.dialogue_id.clone(), self.turn_index)
    }

    pub fn called_llm(&self) -> bool {
        self.llm_parse_ok.is_some() || self.llm_error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub sigma: f64,
    pub p: f64,
    /// Number of preceding turns shown in prompts.
    pub history: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            sigma: 0.12,
            p: crate::lsr::DEFAULT_P,
            history: DEFAULT_HISTORY,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub decisions: Vec<RoutingDecision>,
    pub transcript: Vec<TranscriptEntry>,
    /// Calls that failed outright, in corpus order.
    pub llm_failures: Vec<(UtteranceKey, LlmError)>,
}

impl RunOutput {
    pub fn llm_calls(&self) -> usize {
        self.transcript.len()
    }
}

/// Label used when an LLM reply cannot be used: the out-of-scope token when
/// there is no classifier opinion, otherwise the ensemble vote.
pub fn fallback(verdict: &LlmVerdict, vote_label: Option<&str>, label_space: &LabelSpace) -> String {
    match (&verdict.parsed_label, vote_label) {
        (Some(label), _) => label.clone(),
        (None, Some(vote)) => vote.to_string(),
        (None, None) => label_space.oos_token().to_string(),
    }
}

/// Label for an utterance the cascade does not route. The classifier never
/// abstains in cascade modes; out-of-scope answers come only from the LLM.
pub fn unrouted_label<'a>(summary: &EnsembleSummary, label_space: &'a LabelSpace) -> &'a str {
    summary.vote_label(label_space)
}

fn summary_for(log: &EnsembleLog, key: &UtteranceKey, label_space: &LabelSpace) -> Result<(EnsembleSummary, f64), RouterError> {
    let record = log.get(key).ok_or_else(|| RouterError::MissingRecord(key.clone()))?;
    if record.num_labels() != label_space.m() {
        return Err(RouterError::LabelCount {
            key: key.clone(),
            got: record.num_labels(),
            expected: label_space.m(),
        });
    }
    Ok((summarize(record), record.classifier_seconds()))
}

pub fn run_bert_only(
    corpus: &Corpus,
    log: &EnsembleLog,
    label_space: &LabelSpace,
    sigma: f64,
) -> Result<Vec<RoutingDecision>, RouterError> {
    corpus
        .utterances()
        .map(|u| {
            let key = u.key();
            let (summary, classifier_seconds) = summary_for(log, &key, label_space)?;
            Ok(RoutingDecision {
                dialogue_id: key.dialogue_id,
                turn_index: key.turn_index,
                method: Method::BertOnly,
                vote_label: Some(summary.vote_label(label_space).to_string()),
                uncertainty: Some(summary.uncertainty),
                routed: false,
                offered_labels: None,
                final_label: decide_oos(&summary, sigma, label_space).to_string(),
                llm_parse_ok: None,
                llm_error: None,
                latency: LatencyBreakdown {
                    classifier_seconds,
                    llm_seconds: 0.0,
                },
            })
        })
        .collect()
}

// A decision awaiting its LLM reply.
struct Pending {
    index: usize,
    key: UtteranceKey,
    prompt: String,
    offered: Vec<String>,
}

fn prompt_for(window: &ContextWindow<'_>, labels: Vec<String>, label_space: &LabelSpace) -> Result<String, RouterError> {
    Ok(render_prompt(&PromptSpec::with_labels(window, labels, label_space))?)
}

// Sends the pending prompts and folds the replies into `decisions`.
fn resolve(
    backend: &dyn LlmBackend,
    pending: Vec<Pending>,
    decisions: &mut [RoutingDecision],
    label_space: &LabelSpace,
) -> (Vec<TranscriptEntry>, Vec<(UtteranceKey, LlmError)>) {
    let requests: Vec<LlmRequest<'_>> = pending
        .iter()
        .map(|p| LlmRequest {
            key: &p.key,
            prompt: &p.prompt,
        })
        .collect();
    let results = complete_all(backend, &requests);

    let mut transcript = Vec::with_capacity(pending.len());
    let mut failures = Vec::new();
    for (job, result) in pending.iter().zip(results) {
        let decision = &mut decisions[job.index];
        let entry = TranscriptEntry {
            key: job.key.clone(),
            request: backend.request_body(&job.prompt),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        transcript.push(entry);
        match result {
            Ok(response) => {
                let verdict = parse_verdict(&response.raw_text, &job.offered, label_space.oos_token());
                decision.final_label = fallback(&verdict, decision.vote_label.as_deref(), label_space);
                decision.llm_parse_ok = Some(verdict.parse_ok());
                decision.latency.llm_seconds = response.latency_seconds;
            }
            Err(err) => {
                let failed = LlmVerdict {
                    raw_text: String::new(),
                    parsed_label: None,
                    failure: None,
                };
                decision.final_label = fallback(&failed, decision.vote_label.as_deref(), label_space);
                decision.llm_parse_ok = Some(false);
                decision.llm_error = Some(err.to_string());
                failures.push((job.key.clone(), err));
            }
        }
    }
    (transcript, failures)
}

pub fn run_llm_only(
    corpus: &Corpus,
    backend: &dyn LlmBackend,
    label_space: &LabelSpace,
    history: usize,
) -> Result<RunOutput, RouterError> {
    let mut decisions = Vec::with_capacity(corpus.num_utterances());
    let mut pending = Vec::with_capacity(corpus.num_utterances());
    for window in corpus.windows(history) {
        let key = window.target.key();
        let offered = label_space.in_scope().to_vec();
        pending.push(Pending {
            index: decisions.len(),
            key: key.clone(),
            prompt: prompt_for(&window, offered.clone(), label_space)?,
            offered,
        });
        decisions.push(RoutingDecision {
            dialogue_id: key.dialogue_id,
            turn_index: key.turn_index,
            method: Method::LlmOnly,
            vote_label: None,
            uncertainty: None,
            routed: false,
            offered_labels: None,
            final_label: label_space.oos_token().to_string(),
            llm_parse_ok: None,
            llm_error: None,
            latency: LatencyBreakdown::default(),
        });
    }
    let (transcript, llm_failures) = resolve(backend, pending, &mut decisions, label_space);
    Ok(RunOutput {
        decisions,
        transcript,
        llm_failures,
    })
}

/// Cascade: route uncertain utterances to the LLM, optionally offering only
/// the reduced label set (`lsr_enabled`).
pub fn run_routed(
    corpus: &Corpus,
    log: &EnsembleLog,
    backend: &dyn LlmBackend,
    label_space: &LabelSpace,
    config: &RouterConfig,
    lsr_enabled: bool,
) -> Result<RunOutput, RouterError> {
    let method = if lsr_enabled { Method::RoutedLsr } else { Method::Routed };
    let mut decisions = Vec::with_capacity(corpus.num_utterances());
    let mut pending = Vec::new();
    for window in corpus.windows(config.history) {
        let key = window.target.key();
        let (summary, classifier_seconds) = summary_for(log, &key, label_space)?;
        let routed = should_route(&summary, config.sigma);
        let vote = summary.vote_label(label_space).to_string();
        let mut offered_labels = None;
        if routed {
            let offered = if lsr_enabled {
                let set = reduce_label_space(&summary.mean_probs, label_space, config.p)?;
                let labels = set.labels.clone();
                offered_labels = Some(set);
                labels
            } else {
                label_space.in_scope().to_vec()
            };
            pending.push(Pending {
                index: decisions.len(),
                key: key.clone(),
                prompt: prompt_for(&window, offered.clone(), label_space)?,
                offered,
            });
        }
        decisions.push(RoutingDecision {
            dialogue_id: key.dialogue_id,
            turn_index: key.turn_index,
            method,
            final_label: unrouted_label(&summary, label_space).to_string(),
            vote_label: Some(vote),
            uncertainty: Some(summary.uncertainty),
            routed,
            offered_labels,
            llm_parse_ok: None,
            llm_error: None,
            latency: LatencyBreakdown {
                classifier_seconds,
                llm_seconds: 0.0,
            },
        });
    }
    let (transcript, llm_failures) = resolve(backend, pending, &mut decisions, label_space);
    Ok(RunOutput {
        decisions,
        transcript,
        llm_failures,
    })
}

/// Dispatches to the pipeline for `method`.
pub fn run_method(
    method: Method,
    corpus: &Corpus,
    log: Option<&EnsembleLog>,
    backend: Option<&dyn LlmBackend>,
    label_space: &LabelSpace,
    config: &RouterConfig,
) -> Result<RunOutput, RouterError> {
    let need_log = || log.ok_or(RouterError::NeedsEnsemble { method });
    let need_backend = || backend.ok_or(RouterError::NeedsBackend { method });
    match method {
        Method::BertOnly => Ok(RunOutput {
            decisions: run_bert_only(corpus, need_log()?, label_space, config.sigma)?,
            ..RunOutput::default()
        }),
        Method::LlmOnly => run_llm_only(corpus, need_backend()?, label_space, config.history),
        Method::Routed => run_routed(corpus, need_log()?, need_backend()?, label_space, config, false),
        Method::RoutedLsr => run_routed(corpus, need_log()?, need_backend()?, label_space, config, true),
    }
}

pub fn write_decision_log<W: Write>(decisions: &[RoutingDecision], mut out: W) -> std::io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_decision_log<R: BufRead>(input: R) -> Result<Vec<RoutingDecision>, RouterError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_text = line?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line_text).map_err(|e| RouterError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// How the LLM stage was served in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    None,
    Stub {
        mode: StubMode,
        seed: u64,
        latency: StubLatency,
    },
    Http {
        base_url: String,
        model_name: String,
        temperature: f64,
        timeout_seconds: f64,
        max_retries: u32,
        max_parallel: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn from_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub corpus: InputFile,
    pub labels: Vec<String>,
    pub oos_token: String,
    pub ensemble: Option<InputFile>,
    pub expected_runs: usize,
    pub sigma: f64,
    pub p: f64,
    pub history: usize,
    pub backend: BackendSpec,
    /// SHA-256 over the canonical JSON of every other field.
    #[serde(default)]
    pub config_hash: String,
}

impl RunManifest {
    pub fn compute_hash(&self) -> String {
        let mut unhashed = self.clone();
        unhashed.config_hash.clear();
        let canonical = serde_json::to_vec(&unhashed).expect("manifest serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn seal(mut self) -> Self {
        self.config_hash = self.compute_hash();
        self
    }

    pub fn is_sealed(&self) -> bool {
        self.config_hash == self.compute_hash()
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            sigma: self.sigma,
            p: self.p,
            history: self.history,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls() -> LabelSpace {
        LabelSpace::with_default_oos(["a", "b"]).unwrap()
    }

    fn verdict(label: Option<&str>) -> LlmVerdict {
        LlmVerdict {
            raw_text: String::new(),
            parsed_label: label.map(str::to_string),
            failure: None,
        }
    }

    #[test]
    fn fallback_rules() {
        assert_eq!(fallback(&verdict(None), Some("a"), &ls()), "a");
        assert_eq!(fallback(&verdict(None), None, &ls()), "UNK");
        assert_eq!(fallback(&verdict(Some("b")), Some("a"), &ls()), "b");
        assert_eq!(fallback(&verdict(Some("UNK")), None, &ls()), "UNK");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("bert".parse::<Method>().is_err());
    }

    #[test]
    fn manifest_hash_tracks_fields() {
        let m = RunManifest {
            method: Method::RoutedLsr,
            corpus: InputFile::from_bytes("c.jsonl", b"x"),
            labels: vec!["a".into()],
            oos_token: "UNK".into(),
            ensemble: None,
            expected_runs: 5,
            sigma: 0.12,
            p: 0.85,
            history: 3,
            backend: BackendSpec::None,
            config_hash: String::new(),
        }
        .seal();
        assert!(m.is_sealed());
        let mut changed = m.clone();
        changed.p = 0.9;
        assert!(!changed.is_sealed());
        assert_ne!(changed.compute_hash(), m.config_hash);
    }
}
