use std::path::PathBuf;

use anyhow::Result;
use cascade_core::ensemble::{should_route, summarize};
use cascade_core::router::RouterError;
use clap::Args;

use super::{check_router, keys, InputArgs, DEFAULT_RUNS, DEFAULT_SIGMA, INPUT_KEYS};
use crate::config::KeyValues;
use crate::fsio;

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Threshold used to report the routed fraction [default: 0.12].
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
}

pub fn execute(args: ValidateArgs) -> Result<()> {
    let kv = KeyValues::load(args.inputs.config.as_deref(), &keys(&[INPUT_KEYS, &["sigma"]]))?;
    let sigma = kv.or_default(args.sigma, "sigma", DEFAULT_SIGMA)?;
    check_router(&cascade_core::RouterConfig {
        sigma,
        ..Default::default()
    })?;
    let ls = args.inputs.label_space(&kv)?;
    let corpus_path: PathBuf = kv.required(args.inputs.corpus.clone(), "corpus")?;
    let (corpus, _) = fsio::load_corpus(&corpus_path, &ls)?;
    let n = corpus.num_utterances();
    let oos = corpus.utterances().filter(|u| ls.is_oos(&u.gold_intent)).count();
    println!(
        "corpus ok: {} dialogues, {n} utterances, {} in-scope labels, {oos} out-of-scope golds ({:.2}%)",
        corpus.dialogues.len(),
        ls.m(),
        100.0 * oos as f64 / n as f64
    );

    if let Some(path) = kv.or::<PathBuf>(args.inputs.ensemble.clone(), "ensemble")? {
        let runs = kv.or_default(args.inputs.runs, "runs", DEFAULT_RUNS)?;
        let (log, _) = fsio::load_ensemble(&path, &ls, runs)?;
        let mut routed = 0;
        for u in corpus.utterances() {
            let record = log.get(&u.key()).ok_or_else(|| RouterError::MissingRecord(u.key()))?;
            if should_route(&summarize(record), sigma) {
                routed += 1;
            }
        }
        let extra = log.len() - n;
        println!(
            "ensemble ok: {} records x {runs} runs; {routed} utterances ({:.2}%) above sigma {sigma}{}",
            log.len(),
            100.0 * routed as f64 / n as f64,
            if extra > 0 { format!("; {extra} records not in the corpus") } else { String::new() }
        );
    }
    Ok(())
}
