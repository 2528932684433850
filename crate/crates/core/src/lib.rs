//! Hybrid intent recognition: a seeded classifier ensemble handles confident
//! utterances and routes uncertain ones to an LLM, whose prompt offers only
//! the labels the ensemble considers plausible.
//!
//! Module map:
//!
//! * [`corpus`]: dialogue corpora, label spaces, context windows
//! * [`ensemble`]: run aggregation, uncertainty, abstention and routing tests
//! * [`lsr`]: cumulative-probability label space reduction
//! * [`prompting`]: prompt rendering and reply parsing
//! * [`llm_client`]: HTTP and stub LLM backends
//! * [`router`]: the four pipelines and decision logs
//! * [`eval`]: metrics and latency accounting
//! * [`synth`]: seeded synthetic corpora and ensemble logs

pub mod corpus;
pub mod ensemble;
pub mod eval;
pub mod llm_client;
pub mod lsr;
pub mod prompting;
pub mod router;
pub mod synth;

pub use corpus::{Corpus, Dialogue, LabelSpace, Utterance, UtteranceKey};
pub use ensemble::{EnsembleLog, EnsembleRecord, EnsembleSummary};
pub use eval::{EvalReport, LatencyReport, OosOnInScope};
pub use llm_client::{HttpClient, LlmBackend, LlmEndpointConfig, StubClient, StubLatency, StubMode, StubOracle};
pub use lsr::ReducedLabelSet;
pub use prompting::{LlmVerdict, PromptSpec};
pub use router::{Method, RoutingDecision, RouterConfig, RunManifest};
