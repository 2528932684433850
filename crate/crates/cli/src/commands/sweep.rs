use std::path::PathBuf;

use anyhow::Result;
use cascade_core::eval::{average_latency, evaluate, OosOnInScope};
use cascade_core::lsr::{hit_rate, reduction_stats};
use cascade_core::router::{Method, RouterConfig, RoutingDecision};
use clap::Args;
use serde::Serialize;

use super::{check_router, keys, BackendArgs, InputArgs, RouterArgs, Setup, BACKEND_KEYS, INPUT_KEYS, ROUTER_KEYS};
use crate::config::KeyValues;
use crate::exit::{invalid, TransportFailed};
use crate::fsio;

const SWEEP_KEYS: &[&str] = &["param", "grid", "out"];

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub router: RouterArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Parameter to vary: sigma or p.
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated values, e.g. 0.5,0.85,0.95,0.99.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// CSV output [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Sigma,
    P,
}

#[derive(Serialize)]
struct Row {
    param: &'static str,
    value: f64,
    method: Method,
    /// Utterances routed to the LLM; for bert-only, utterances abstained on.
    routed: usize,
    llm_calls: usize,
    avg_set_size: Option<f64>,
    avg_reduction: Option<f64>,
    hit_rate: Option<f64>,
    is_acc: f64,
    is_wf1: f64,
    is_wp: f64,
    full_acc: f64,
    full_macro_f1: f64,
    f1_oos: f64,
    avg_latency_seconds: f64,
}

fn parse_grid(raw: &str) -> Result<Vec<f64>> {
    let values = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| invalid(format!("grid value {s:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(invalid("grid is empty"));
    }
    Ok(values)
}

fn row(setup: &Setup, param: Param, value: f64, decisions: &[RoutingDecision], llm_calls: usize) -> Result<Row> {
    let ls = &setup.label_space;
    let routed = match setup.method {
        Method::BertOnly => decisions.iter().filter(|d| ls.is_oos(&d.final_label)).count(),
        _ => decisions.iter().filter(|d| d.routed || d.called_llm()).count(),
    };
    let mut sets = Vec::new();
    let mut in_scope_sets = Vec::new();
    let mut golds = Vec::new();
    for (d, u) in decisions.iter().zip(setup.corpus.utterances()) {
        if let Some(set) = &d.offered_labels {
            sets.push(set.clone());
            if ls.is_in_scope(&u.gold_intent) {
                in_scope_sets.push(set.clone());
                golds.push(u.gold_intent.as_str());
            }
        }
    }
    let stats = (!sets.is_empty()).then(|| reduction_stats(&sets, ls.m())).transpose()?;
    let hits = (!golds.is_empty()).then(|| hit_rate(&in_scope_sets, &golds)).transpose()?;
    let report = evaluate(decisions, &setup.corpus, ls, OosOnInScope::CountAsError)?;
    Ok(Row {
        param: match param {
            Param::Sigma => "sigma",
            Param::P => "p",
        },
        value,
        method: setup.method,
        routed,
        llm_calls,
        avg_set_size: stats.map(|s| s.avg_set_size),
        avg_reduction: stats.map(|s| s.avg_reduction),
        hit_rate: hits,
        is_acc: report.is_acc,
        is_wf1: report.is_wf1,
        is_wp: report.is_wp,
        full_acc: report.full_acc,
        full_macro_f1: report.full_macro_f1,
        f1_oos: report.f1_oos,
        avg_latency_seconds: average_latency(decisions)?,
    })
}

pub fn execute(args: SweepArgs) -> Result<()> {
    let kv = KeyValues::load(
        args.inputs.config.as_deref(),
        &keys(&[INPUT_KEYS, ROUTER_KEYS, BACKEND_KEYS, SWEEP_KEYS]),
    )?;
    let param = match kv.required::<String>(args.param, "param")?.as_str() {
        "sigma" => Param::Sigma,
        "p" => Param::P,
        other => return Err(invalid(format!("unknown sweep parameter {other:?} (expected sigma or p)"))),
    };
    let grid = parse_grid(&kv.required::<String>(args.grid, "grid")?)?;
    let out: Option<PathBuf> = kv.or(args.out, "out")?;
    if let Some(path) = &out {
        fsio::check_output(path)?;
    }
    let setup = Setup::resolve(&args.inputs, &args.router, &args.backend, &kv, Some(Method::RoutedLsr))?;
    let configs: Vec<RouterConfig> = grid
        .iter()
        .map(|&value| {
            let mut config = setup.router;
            match param {
                Param::Sigma => config.sigma = value,
                Param::P => config.p = value,
            }
            check_router(&config).map(|()| config)
        })
        .collect::<Result<_>>()?;

    let backend = setup.build_backend()?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut transport_failures = Vec::new();
    for (config, &value) in configs.iter().zip(&grid) {
        let output = setup.run(backend.as_deref(), config)?;
        writer.serialize(row(&setup, param, value, &output.decisions, output.llm_calls())?)?;
        transport_failures.extend(output.llm_failures);
    }
    let bytes = writer.into_inner()?;
    match &out {
        Some(path) => fsio::write_atomic(path, &bytes)?,
        None => print!("{}", String::from_utf8(bytes)?),
    }

    if let Some((key, err)) = transport_failures.first() {
        return Err(TransportFailed {
            failed: transport_failures.len(),
            first: format!("{key}: {err}"),
        }
        .into());
    }
    Ok(())
}
