//! Subcommands and the run setup they share.

pub mod eval;
pub mod run;
pub mod sweep;
pub mod synth;
pub mod validate;

use std::path::PathBuf;

use anyhow::{Context, Result};
use cascade_core::corpus::{Corpus, LabelSpace, DEFAULT_HISTORY, DEFAULT_OOS_TOKEN};
use cascade_core::ensemble::EnsembleLog;
use cascade_core::llm_client::{
    HttpClient, LlmBackend, LlmEndpointConfig, StubClient, StubLatency, StubMode, StubOracle, AUTH_TOKEN_ENV,
    DEFAULT_MAX_PARALLEL,
};
use cascade_core::lsr::DEFAULT_P;
use cascade_core::router::{run_method, BackendSpec, InputFile, Method, RouterConfig, RunManifest, RunOutput};
use clap::Args;

use crate::config::KeyValues;
use crate::exit::invalid;
use crate::fsio;

pub const DEFAULT_SIGMA: f64 = 0.12;
pub const DEFAULT_RUNS: usize = 5;

pub const INPUT_KEYS: &[&str] = &["corpus", "labels-file", "labels", "oos-token", "ensemble", "runs"];
pub const ROUTER_KEYS: &[&str] = &["method", "sigma", "p", "history"];
pub const BACKEND_KEYS: &[&str] = &[
    "backend",
    "stub-mode",
    "stub-seed",
    "stub-latency-mean",
    "stub-latency-jitter",
    "base-url",
    "model",
    "temperature",
    "timeout",
    "max-retries",
    "max-parallel",
];

pub fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

#[derive(Args, Debug, Default)]
pub struct InputArgs {
    /// Plain-text `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus, one JSON utterance record per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// In-scope intent labels, one per line.
    #[arg(long)]
    pub labels_file: Option<PathBuf>,
    /// In-scope intent labels, comma separated.
    #[arg(long)]
    pub labels: Option<String>,
    /// Out-of-scope label [default: UNK].
    #[arg(long)]
    pub oos_token: Option<String>,
    /// Ensemble probability log, one JSON line per utterance and run.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Runs expected per utterance in the ensemble log [default: 5].
    #[arg(long)]
    pub runs: Option<usize>,
}

impl InputArgs {
    fn any_data(&self) -> bool {
        self.corpus.is_some()
            || self.labels_file.is_some()
            || self.labels.is_some()
            || self.oos_token.is_some()
            || self.ensemble.is_some()
            || self.runs.is_some()
    }

    pub fn label_space(&self, kv: &KeyValues) -> Result<LabelSpace> {
        let file: Option<PathBuf> = kv.or(self.labels_file.clone(), "labels-file")?;
        let inline: Option<String> = kv.or(self.labels.clone(), "labels")?;
        // A flag for one form overrides the config's other form.
        let (file, inline) = match (&self.labels_file, &self.labels) {
            (Some(_), None) => (file, None),
            (None, Some(_)) => (None, inline),
            _ => (file, inline),
        };
        let oos = kv.or_default(self.oos_token.clone(), "oos-token", DEFAULT_OOS_TOKEN.to_string())?;
        fsio::label_space(file.as_deref(), inline.as_deref(), &oos)
    }
}

#[derive(Args, Debug, Default)]
pub struct RouterArgs {
    /// bert-only, llm-only, routed or routed-lsr.
    #[arg(long)]
    pub method: Option<Method>,
    /// Route (or abstain) when the ensemble std exceeds this [default: 0.12].
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Cumulative mass kept by label space reduction [default: 0.85].
    #[arg(long)]
    pub p: Option<f64>,
    /// Preceding turns shown in prompts [default: 3].
    #[arg(long)]
    pub history: Option<usize>,
}

impl RouterArgs {
    fn any(&self) -> bool {
        self.method.is_some() || self.sigma.is_some() || self.p.is_some() || self.history.is_some()
    }

    pub fn config(&self, kv: &KeyValues) -> Result<RouterConfig> {
        let config = RouterConfig {
            sigma: kv.or_default(self.sigma, "sigma", DEFAULT_SIGMA)?,
            p: kv.or_default(self.p, "p", DEFAULT_P)?,
            history: kv.or_default(self.history, "history", DEFAULT_HISTORY)?,
        };
        check_router(&config)?;
        Ok(config)
    }
}

pub fn check_router(config: &RouterConfig) -> Result<()> {
    if !config.sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite, got {}", config.sigma)));
    }
    if !(config.p > 0.0 && config.p <= 1.0) {
        return Err(invalid(format!("p must lie in (0, 1], got {}", config.p)));
    }
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct BackendArgs {
    /// LLM backend: stub or http.
    #[arg(long)]
    pub backend: Option<String>,
    /// Stub behaviour: gold (gold label when offered, else out-of-scope), fixed:<label> or malformed.
    #[arg(long)]
    pub stub_mode: Option<String>,
    #[arg(long)]
    pub stub_seed: Option<u64>,
    /// Mean synthetic stub latency in seconds [default: 1.0].
    #[arg(long)]
    pub stub_latency_mean: Option<f64>,
    /// Relative jitter of the stub latency [default: 0.2].
    #[arg(long)]
    pub stub_latency_jitter: Option<f64>,
    /// Chat-completions base URL; requests go to <base-url>/chat/completions.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Per-request timeout in seconds [default: 120].
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Concurrent LLM requests [default: 4].
    #[arg(long)]
    pub max_parallel: Option<usize>,
}

impl BackendArgs {
    fn any(&self) -> bool {
        self.backend.is_some()
            || self.stub_mode.is_some()
            || self.stub_seed.is_some()
            || self.stub_latency_mean.is_some()
            || self.stub_latency_jitter.is_some()
            || self.base_url.is_some()
            || self.model.is_some()
            || self.temperature.is_some()
            || self.timeout.is_some()
            || self.max_retries.is_some()
            || self.max_parallel.is_some()
    }

    pub fn spec(&self, kv: &KeyValues, method: Method) -> Result<BackendSpec> {
        let kind: Option<String> = kv.or(self.backend.clone(), "backend")?;
        if !method.uses_llm() {
            return Ok(BackendSpec::None);
        }
        match kind.as_deref() {
            None => Err(invalid(format!("{method} calls an LLM: pass --backend stub or --backend http"))),
            Some("stub") => {
                let mode = parse_stub_mode(&kv.or_default(self.stub_mode.clone(), "stub-mode", "gold".to_string())?)?;
                let defaults = StubLatency::default();
                let latency = StubLatency {
                    mean_seconds: kv.or_default(self.stub_latency_mean, "stub-latency-mean", defaults.mean_seconds)?,
                    jitter: kv.or_default(self.stub_latency_jitter, "stub-latency-jitter", defaults.jitter)?,
                };
                if !(latency.mean_seconds >= 0.0 && latency.mean_seconds.is_finite()) {
                    return Err(invalid("stub latency mean must be finite and nonnegative"));
                }
                if !(0.0..=1.0).contains(&latency.jitter) {
                    return Err(invalid("stub latency jitter must lie in [0, 1]"));
                }
                Ok(BackendSpec::Stub {
                    mode,
                    seed: kv.or_default(self.stub_seed, "stub-seed", 0)?,
                    latency,
                })
            }
            Some("http") => {
                let spec = BackendSpec::Http {
                    base_url: kv.required(self.base_url.clone(), "base-url")?,
                    model_name: kv.required(self.model.clone(), "model")?,
                    temperature: kv.or_default(self.temperature, "temperature", 0.0)?,
                    timeout_seconds: kv.or_default(self.timeout, "timeout", 120.0)?,
                    max_retries: kv.or_default(self.max_retries, "max-retries", 3)?,
                    max_parallel: kv.or_default(self.max_parallel, "max-parallel", DEFAULT_MAX_PARALLEL)?,
                };
                endpoint_config(&spec)?;
                Ok(spec)
            }
            Some(other) => Err(invalid(format!("unknown backend {other:?} (expected stub or http)"))),
        }
    }
}

pub fn parse_stub_mode(s: &str) -> Result<StubMode> {
    match s {
        "gold" | "always-gold-if-offered" => Ok(StubMode::AlwaysGoldIfOffered),
        "malformed" => Ok(StubMode::Malformed),
        _ => match s.strip_prefix("fixed:") {
            Some(label) if !label.is_empty() => Ok(StubMode::FixedLabel { label: label.to_string() }),
            _ => Err(invalid(format!("unknown stub mode {s:?} (expected gold, fixed:<label> or malformed)"))),
        },
    }
}

fn endpoint_config(spec: &BackendSpec) -> Result<Option<LlmEndpointConfig>> {
    let BackendSpec::Http {
        base_url,
        model_name,
        temperature,
        timeout_seconds,
        max_retries,
        max_parallel,
    } = spec
    else {
        return Ok(None);
    };
    if !(timeout_seconds.is_finite() && *timeout_seconds > 0.0) {
        return Err(invalid(format!("timeout must be positive, got {timeout_seconds}")));
    }
    let mut config = LlmEndpointConfig::new(base_url.clone(), model_name.clone());
    config.temperature = *temperature;
    config.timeout = std::time::Duration::from_secs_f64(*timeout_seconds);
    config.max_retries = *max_retries;
    config.max_parallel = *max_parallel;
    config.validate()?;
    Ok(Some(config.with_token_from_env(AUTH_TOKEN_ENV)))
}

/// Everything a run needs, resolved from flags, config or a manifest.
pub struct Setup {
    pub method: Method,
    pub label_space: LabelSpace,
    pub corpus: Corpus,
    pub corpus_file: InputFile,
    pub log: Option<EnsembleLog>,
    pub ensemble_file: Option<InputFile>,
    pub expected_runs: usize,
    pub router: RouterConfig,
    pub backend: BackendSpec,
}

impl Setup {
    pub fn resolve(
        inputs: &InputArgs,
        router: &RouterArgs,
        backend: &BackendArgs,
        kv: &KeyValues,
        default_method: Option<Method>,
    ) -> Result<Self> {
        let method = match kv.or(router.method, "method")?.or(default_method) {
            Some(m) => m,
            None => return Err(invalid("--method is required (flag or config file)")),
        };
        let router_config = router.config(kv)?;
        let backend = backend.spec(kv, method)?;
        let label_space = inputs.label_space(kv)?;
        let corpus_path: PathBuf = kv.required(inputs.corpus.clone(), "corpus")?;
        let (corpus, corpus_file) = fsio::load_corpus(&corpus_path, &label_space)?;
        let expected_runs = kv.or_default(inputs.runs, "runs", DEFAULT_RUNS)?;
        if expected_runs == 0 {
            return Err(invalid("runs must be at least 1"));
        }
        let (log, ensemble_file) = if method.uses_ensemble() {
            let path: PathBuf = kv
                .or(inputs.ensemble.clone(), "ensemble")?
                .ok_or_else(|| invalid(format!("{method} needs --ensemble")))?;
            let (log, file) = fsio::load_ensemble(&path, &label_space, expected_runs)?;
            (Some(log), Some(file))
        } else {
            (None, None)
        };
        Ok(Self {
            method,
            label_space,
            corpus,
            corpus_file,
            log,
            ensemble_file,
            expected_runs,
            router: router_config,
            backend,
        })
    }

    pub fn from_manifest(manifest: &RunManifest) -> Result<Self> {
        if !manifest.is_sealed() {
            return Err(invalid("manifest config_hash does not match its contents"));
        }
        check_router(&manifest.router_config())?;
        endpoint_config(&manifest.backend)?;
        let label_space = LabelSpace::new(manifest.labels.clone(), manifest.oos_token.clone())?;
        let corpus_bytes = fsio::verify_input(&manifest.corpus)?;
        let corpus = cascade_core::corpus::parse_corpus(&String::from_utf8_lossy(&corpus_bytes), &label_space)
            .with_context(|| format!("in corpus {}", manifest.corpus.path))?;
        let log = match &manifest.ensemble {
            Some(file) => {
                let bytes = fsio::verify_input(file)?;
                let log = cascade_core::ensemble::parse_ensemble_log(
                    &String::from_utf8_lossy(&bytes),
                    &label_space,
                    manifest.expected_runs,
                )
                .with_context(|| format!("in ensemble log {}", file.path))?;
                Some(log)
            }
            None => None,
        };
        Ok(Self {
            method: manifest.method,
            label_space,
            corpus,
            corpus_file: manifest.corpus.clone(),
            log,
            ensemble_file: manifest.ensemble.clone(),
            expected_runs: manifest.expected_runs,
            router: manifest.router_config(),
            backend: manifest.backend.clone(),
        })
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            method: self.method,
            corpus: self.corpus_file.clone(),
            labels: self.label_space.in_scope().to_vec(),
            oos_token: self.label_space.oos_token().to_string(),
            ensemble: self.ensemble_file.clone(),
            expected_runs: self.expected_runs,
            sigma: self.router.sigma,
            p: self.router.p,
            history: self.router.history,
            backend: self.backend.clone(),
            config_hash: String::new(),
        }
        .seal()
    }

    pub fn build_backend(&self) -> Result<Option<Box<dyn LlmBackend>>> {
        Ok(match &self.backend {
            BackendSpec::None => None,
            BackendSpec::Stub { mode, seed, latency } => Some(Box::new(StubClient::new(
                StubOracle::from_corpus(&self.corpus, mode),
                *latency,
                *seed,
            ))),
            spec @ BackendSpec::Http { .. } => {
                let config = endpoint_config(spec)?.expect("http spec yields a config");
                Some(Box::new(HttpClient::new(config)?))
            }
        })
    }

    pub fn run(&self, backend: Option<&dyn LlmBackend>, router: &RouterConfig) -> Result<RunOutput> {
        Ok(run_method(
            self.method,
            &self.corpus,
            self.log.as_ref(),
            backend,
            &self.label_space,
            router,
        )?)
    }
}

pub fn conflicts_with_manifest(inputs: &InputArgs, router: &RouterArgs, backend: &BackendArgs) -> bool {
    inputs.any_data() || router.any() || backend.any()
}
