//! Maps errors to process exit codes.

use std::fmt;

use cascade_core::corpus::CorpusError;
use cascade_core::ensemble::EnsembleError;
use cascade_core::eval::EvalError;
use cascade_core::llm_client::LlmError;
use cascade_core::lsr::LsrError;
use cascade_core::prompting::PromptError;
use cascade_core::router::RouterError;
use cascade_core::synth::SynthError;

pub const VALIDATION: u8 = 2;
pub const TRANSPORT: u8 = 3;
pub const INTERNAL: u8 = 4;

/// Bad flags, config values or input files.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    Invalid(message.into()).into()
}

/// LLM calls that failed after retries.
#[derive(Debug)]
pub struct TransportFailed {
    pub failed: usize,
    pub first: String,
}

impl fmt::Display for TransportFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} LLM call(s) failed; first: {}", self.failed, self.first)
    }
}

impl std::error::Error for TransportFailed {}

fn llm_code(e: &LlmError) -> u8 {
    match e {
        LlmError::Config(_) => VALIDATION,
        _ => TRANSPORT,
    }
}

fn router_code(e: &RouterError) -> u8 {
    match e {
        RouterError::Io(_) => INTERNAL,
        _ => VALIDATION,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>()
            || cause.is::<CorpusError>()
            || cause.is::<EnsembleError>()
            || cause.is::<EvalError>()
            || cause.is::<LsrError>()
            || cause.is::<PromptError>()
            || cause.is::<SynthError>()
        {
            return VALIDATION;
        }
        if cause.is::<TransportFailed>() {
            return TRANSPORT;
        }
        if let Some(e) = cause.downcast_ref::<LlmError>() {
            return llm_code(e);
        }
        if let Some(e) = cause.downcast_ref::<RouterError>() {
            return router_code(e);
        }
    }
    INTERNAL
}
