//! LLM backends: an HTTP chat-completions client and a deterministic stub.
//!
//! Both implement [`LlmBackend`]. Latency is wall-clock time around the HTTP
//! exchange of the final attempt; the stub instead reports a synthetic latency
//! drawn from a seeded distribution and never sleeps.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Corpus, UtteranceKey};
use crate::prompting::{format_reply, parse_prompt};

pub const DEFAULT_MAX_PARALLEL: usize = 4;
pub const AUTH_TOKEN_ENV: &str = "CASCADE_LLM_API_KEY";

const BODY_EXCERPT_CHARS: usize = 200;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body_excerpt}")]
    Status {
        status: u16,
        body_excerpt: String,
        attempts: u32,
    },
    #[error("cannot decode completion: {0}")]
    Decode(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_transport(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Status { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    #[serde(with = "duration_secs")]
    pub backoff: Duration,
    pub max_parallel: usize,
    /// Bearer token. Never serialized; read from the environment.
    #[serde(skip)]
    pub auth_token: Option<String>,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            max_parallel: DEFAULT_MAX_PARALLEL,
            auth_token: None,
        }
    }

    /// Fills `auth_token` from `var` if it is set and non-empty.
    pub fn with_token_from_env(mut self, var: &str) -> Self {
        self.auth_token = std::env::var(var).ok().filter(|t| !t.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout.is_zero() {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if self.max_parallel == 0 {
            return Err(LlmError::Config("max_parallel must be at least 1".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(LlmError::Config(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LlmRequest<'a> {
    pub key: &'a UtteranceKey,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedResponse {
    pub raw_text: String,
    pub latency_seconds: f64,
    pub attempt_count: u32,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<TimedResponse, LlmError>;

    /// The exact request body sent for `prompt`, for transcripts and replay.
    fn request_body(&self, prompt: &str) -> Value;

    /// Upper bound on concurrent calls.
    fn max_parallel(&self) -> usize {
        DEFAULT_MAX_PARALLEL
    }
}

fn chat_body(model: &str, temperature: f64, prompt: &str) -> Value {
    json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": temperature,
    })
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct HttpClient {
    config: LlmEndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: LlmEndpointConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn backoff(&self, retry: u32) -> Duration {
        self.config
            .backoff
            .saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
            .min(MAX_BACKOFF)
    }
}

enum Attempt {
    Done(String),
    Retryable(LlmError),
    Fatal(LlmError),
}

impl HttpClient {
    fn attempt(&self, body: &Value, attempts: u32) -> Attempt {
        let mut req = self.client.post(self.config.endpoint()).json(body);
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let response = match req.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retryable(LlmError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retryable(LlmError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        if !status.is_success() {
            let err = LlmError::Status {
                status: status.as_u16(),
                body_excerpt: text.chars().take(BODY_EXCERPT_CHARS).collect(),
                attempts,
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retryable(err)
            } else {
                Attempt::Fatal(err)
            };
        }
        Attempt::Done(text)
    }
}

impl LlmBackend for HttpClient {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<TimedResponse, LlmError> {
        let body = self.request_body(request.prompt);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let started = Instant::now();
            match self.attempt(&body, attempts) {
                Attempt::Done(text) => {
                    let latency_seconds = started.elapsed().as_secs_f64();
                    let parsed: ChatResponse =
                        serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()))?;
                    let raw_text = parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .ok_or_else(|| LlmError::Decode("response has no message content".into()))?;
                    return Ok(TimedResponse {
                        raw_text,
                        latency_seconds,
                        attempt_count: attempts,
                    });
                }
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retryable(err) => {
                    if attempts > self.config.max_retries {
                        return Err(err);
                    }
                    thread::sleep(self.backoff(attempts - 1));
                }
            }
        }
    }

    fn request_body(&self, prompt: &str) -> Value {
        chat_body(&self.config.model_name, self.config.temperature, prompt)
    }

    fn max_parallel(&self) -> usize {
        self.config.max_parallel
    }
}

/// Scripted behaviour of the stub for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StubBehavior {
    /// Answer `gold` when it is offered in the prompt, the out-of-scope token otherwise.
    AlwaysGoldIfOffered { gold: String },
    FixedLabel { label: String },
    Malformed,
}

/// Corpus-wide stub mode, expanded per utterance by [`StubOracle::from_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StubMode {
    AlwaysGoldIfOffered,
    FixedLabel { label: String },
    Malformed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StubOracle {
    behaviors: HashMap<UtteranceKey, StubBehavior>,
}

impl StubOracle {
    pub fn new(behaviors: HashMap<UtteranceKey, StubBehavior>) -> Self {
        Self { behaviors }
    }

    pub fn from_corpus(corpus: &Corpus, mode: &StubMode) -> Self {
        let behaviors = corpus
            .utterances()
            .map(|u| {
                let behavior = match mode {
                    StubMode::AlwaysGoldIfOffered => StubBehavior::AlwaysGoldIfOffered {
                        gold: u.gold_intent.clone(),
                    },
                    StubMode::FixedLabel { label } => StubBehavior::FixedLabel { label: label.clone() },
                    StubMode::Malformed => StubBehavior::Malformed,
                };
                (u.key(), behavior)
            })
            .collect();
        Self { behaviors }
    }

    pub fn get(&self, key: &UtteranceKey) -> Option<&StubBehavior> {
        self.behaviors.get(key)
    }

    pub fn insert(&mut self, key: UtteranceKey, behavior: StubBehavior) {
        self.behaviors.insert(key, behavior);
    }
}

/// Synthetic latency: uniform in `mean * [1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubLatency {
    pub mean_seconds: f64,
    pub jitter: f64,
}

impl Default for StubLatency {
    fn default() -> Self {
        Self {
            mean_seconds: 1.0,
            jitter: 0.2,
        }
    }
}

pub const MALFORMED_REPLY: &str = "I think this utterance is about something else entirely.";

pub struct StubClient {
    oracle: StubOracle,
    latency: StubLatency,
    seed: u64,
    max_parallel: usize,
}

impl StubClient {
    pub fn new(oracle: StubOracle, latency: StubLatency, seed: u64) -> Self {
        Self {
            oracle,
            latency,
            seed,
            max_parallel: DEFAULT_MAX_PARALLEL,
        }
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    // Keyed per utterance so the value does not depend on call order.
    fn latency_for(&self, key: &UtteranceKey) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key));
        let u: f64 = rng.gen_range(-1.0..=1.0);
        (self.latency.mean_seconds * (1.0 + self.latency.jitter * u)).max(f64::MIN_POSITIVE)
    }
}

fn fnv1a(key: &UtteranceKey) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let turn = (key.turn_index as u64).to_le_bytes();
    let bytes = key.dialogue_id.as_bytes().iter().chain(&[0xff]).chain(&turn);
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Answers the stub gives; exposed for tests that script expected replies.
pub fn stub_complete(oracle: &StubOracle, key: &UtteranceKey, prompt: &str) -> Result<String, LlmError> {
    let behavior = oracle
        .get(key)
        .ok_or_else(|| LlmError::Config(format!("stub has no behaviour for {key}")))?;
    Ok(match behavior {
        StubBehavior::AlwaysGoldIfOffered { gold } => {
            let spec = parse_prompt(prompt).map_err(|e| LlmError::Config(format!("stub cannot read prompt: {e}")))?;
            if spec.labels.iter().any(|l| l == gold) {
                format_reply(gold)
            } else {
                format_reply(&spec.oos_token)
            }
        }
        StubBehavior::FixedLabel { label } => format_reply(label),
        StubBehavior::Malformed => MALFORMED_REPLY.to_string(),
    })
}

impl LlmBackend for StubClient {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<TimedResponse, LlmError> {
        let raw_text = stub_complete(&self.oracle, request.key, request.prompt)?;
        Ok(TimedResponse {
            raw_text,
            latency_seconds: self.latency_for(request.key),
            attempt_count: 1,
        })
    }

    fn request_body(&self, prompt: &str) -> Value {
        chat_body("stub", 0.0, prompt)
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}

/// Runs every request with at most `backend.max_parallel()` in flight and
/// returns results in request order.
pub fn complete_all(
    backend: &dyn LlmBackend,
    requests: &[LlmRequest<'_>],
) -> Vec<Result<TimedResponse, LlmError>> {
    let workers = backend.max_parallel().max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TimedResponse, LlmError>>>> = Mutex::new(vec![None; requests.len()]);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(request) = requests.get(i) else {
                    break;
                };
                let result = backend.complete(request);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every request completed"))
        .collect()
}

/// One line of a request/response transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: UtteranceKey,
    pub request: Value,
    pub response: Option<TimedResponse>,
    pub error: Option<String>,
}

pub fn write_transcript<W: Write>(entries: &[TranscriptEntry], mut out: W) -> std::io::Result<()> {
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{render_prompt, PromptSpec};

    fn prompt(labels: &[&str]) -> String {
        render_prompt(&PromptSpec {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            oos_token: "UNK".into(),
            history_lines: vec![],
            utterance: "hello".into(),
        })
        .unwrap()
    }

    fn oracle(behavior: StubBehavior) -> (UtteranceKey, StubOracle) {
        let key = UtteranceKey::new("d", 0);
        let mut o = StubOracle::default();
        o.insert(key.clone(), behavior);
        (key, o)
    }

    #[test]
    fn gold_if_offered() {
        let (key, o) = oracle(StubBehavior::AlwaysGoldIfOffered { gold: "a".into() });
        assert_eq!(stub_complete(&o, &key, &prompt(&["a", "b"])).unwrap(), r#"{"intent":"a"}"#);
        assert_eq!(stub_complete(&o, &key, &prompt(&["b"])).unwrap(), r#"{"intent":"UNK"}"#);
    }

    #[test]
    fn fixed_and_malformed() {
        let (key, o) = oracle(StubBehavior::FixedLabel { label: "x".into() });
        assert_eq!(stub_complete(&o, &key, &prompt(&["a"])).unwrap(), r#"{"intent":"x"}"#);
        let (key, o) = oracle(StubBehavior::Malformed);
        let reply = stub_complete(&o, &key, &prompt(&["a"])).unwrap();
        assert!(serde_json::from_str::<Value>(&reply).is_err());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let (_, o) = oracle(StubBehavior::Malformed);
        let err = stub_complete(&o, &UtteranceKey::new("zz", 1), "x").unwrap_err();
        assert!(matches!(err, LlmError::Config(_)));
    }

    #[test]
    fn stub_latency_is_seeded() {
        let (key, o) = oracle(StubBehavior::Malformed);
        let lat = StubLatency {
            mean_seconds: 2.0,
            jitter: 0.5,
        };
        let a = StubClient::new(o.clone(), lat, 7);
        let b = StubClient::new(o.clone(), lat, 7);
        let c = StubClient::new(o, lat, 8);
        let p = prompt(&["a"]);
        let req = LlmRequest { key: &key, prompt: &p };
        let la = a.complete(&req).unwrap().latency_seconds;
        assert_eq!(la.to_bits(), b.complete(&req).unwrap().latency_seconds.to_bits());
        assert_ne!(la, c.complete(&req).unwrap().latency_seconds);
        assert!((1.0..=3.0).contains(&la));
    }

    #[test]
    fn config_validation() {
        let mut c = LlmEndpointConfig::new("http://localhost:1", "m");
        assert!(c.validate().is_ok());
        c.timeout = Duration::ZERO;
        assert!(c.validate().is_err());
        let c = LlmEndpointConfig::new("localhost", "m");
        assert!(c.validate().is_err());
        assert_eq!(
            LlmEndpointConfig::new("http://h/v1/", "m").endpoint(),
            "http://h/v1/chat/completions"
        );
    }

    #[test]
    fn request_body_shape() {
        let client = HttpClient::new(LlmEndpointConfig::new("http://localhost:1", "mixtral")).unwrap();
        let body = client.request_body("hi");
        assert_eq!(body["model"], "mixtral");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let mut cfg = LlmEndpointConfig::new("http://localhost:1", "m");
        cfg.backoff = Duration::from_millis(100);
        let client = HttpClient::new(cfg).unwrap();
        assert_eq!(client.backoff(0), Duration::from_millis(100));
        assert_eq!(client.backoff(3), Duration::from_millis(800));
        assert_eq!(client.backoff(40), MAX_BACKOFF);
    }
}
