use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cascade_core::eval::{average_latency, evaluate, latency_stats, OosOnInScope};
use cascade_core::router::{read_decision_log, RoutingDecision};
use clap::Args;

use super::keys;
use crate::config::KeyValues;
use crate::exit::invalid;
use crate::fsio;

const EVAL_KEYS: &[&str] = &[
    "decisions",
    "corpus",
    "labels-file",
    "labels",
    "oos-token",
    "baseline",
    "report",
    "oos-on-in-scope",
];

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Plain-text `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Decision log written by `run`.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub labels_file: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub oos_token: Option<String>,
    /// Decision log whose average latency is the ratio denominator.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Also write metrics as `key=value` lines to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// How in-scope metrics treat an out-of-scope prediction on an in-scope
    /// gold: error (counts against the gold class) or exclude [default: error].
    #[arg(long)]
    pub oos_on_in_scope: Option<String>,
}

fn parse_policy(s: &str) -> Result<OosOnInScope> {
    match s {
        "error" => Ok(OosOnInScope::CountAsError),
        "exclude" => Ok(OosOnInScope::Exclude),
        _ => Err(invalid(format!("unknown oos-on-in-scope policy {s:?} (expected error or exclude)"))),
    }
}

pub fn read_decisions(path: &Path) -> Result<Vec<RoutingDecision>> {
    let bytes = fsio::read_input(path)?;
    read_decision_log(bytes.as_slice()).with_context(|| format!("in decision log {}", path.display()))
}

pub fn execute(args: EvalArgs) -> Result<()> {
    let kv = KeyValues::load(args.config.as_deref(), &keys(&[EVAL_KEYS]))?;
    let inputs = super::InputArgs {
        labels_file: args.labels_file,
        labels: args.labels,
        oos_token: args.oos_token,
        ..Default::default()
    };
    let label_space = inputs.label_space(&kv)?;
    let policy = parse_policy(&kv.or_default(args.oos_on_in_scope, "oos-on-in-scope", "error".to_string())?)?;
    let corpus_path: PathBuf = kv.required(args.corpus, "corpus")?;
    let decisions_path: PathBuf = kv.required(args.decisions, "decisions")?;
    let baseline: Option<PathBuf> = kv.or(args.baseline, "baseline")?;
    let report_path: Option<PathBuf> = kv.or(args.report, "report")?;
    if let Some(path) = &report_path {
        fsio::check_output(path)?;
    }

    let (corpus, _) = fsio::load_corpus(&corpus_path, &label_space)?;
    let decisions = read_decisions(&decisions_path)?;
    let baseline_avg = match &baseline {
        Some(path) => Some(average_latency(&read_decisions(path)?)?),
        None => None,
    };
    let report = evaluate(&decisions, &corpus, &label_space, policy)?;
    let latency = latency_stats(&decisions, baseline_avg)?;

    print!("{}", report.to_table());
    println!("{:<14} {:>7.3}", "avg latency s", latency.avg_latency_seconds);
    if let Some(ratio) = latency.latency_ratio {
        println!("{:<14} {:>7.3}", "latency ratio", ratio);
    }
    println!("{:<14} {:>7}", "LLM calls", latency.llm_calls);

    if let Some(path) = &report_path {
        let mut text = report.to_key_values();
        text.push_str(&latency.to_key_values());
        fsio::write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}
