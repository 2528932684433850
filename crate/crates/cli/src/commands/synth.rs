use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cascade_core::ensemble::write_ensemble_log;
use cascade_core::synth::{generate, NoiseProfile, SynthConfig};
use clap::Args;

use super::keys;
use crate::config::KeyValues;
use crate::exit::invalid;
use crate::fsio;

const SYNTH_KEYS: &[&str] = &[
    "out-dir",
    "dialogues",
    "utterances",
    "m",
    "oos-fraction",
    "runs",
    "noise",
    "hit-rate",
    "run-latency",
    "seed",
];

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Plain-text `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for corpus.jsonl, ensemble.jsonl and labels.txt.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of dialogues [default: 29].
    #[arg(long)]
    pub dialogues: Option<usize>,
    /// Total utterances [default: 768].
    #[arg(long)]
    pub utterances: Option<usize>,
    /// In-scope intents [default: 8].
    #[arg(long)]
    pub m: Option<usize>,
    /// Share of out-of-scope utterances [default: 0.22].
    #[arg(long)]
    pub oos_fraction: Option<f64>,
    /// Ensemble runs per utterance [default: 5].
    #[arg(long)]
    pub runs: Option<usize>,
    /// none, default, or uncertain=<f>,error=<f>.
    #[arg(long)]
    pub noise: Option<NoiseProfile>,
    /// Chance an uncertain in-scope gold is among the top candidates [default: 0.93].
    #[arg(long)]
    pub hit_rate: Option<f64>,
    /// Mean per-run classifier latency in seconds [default: 0.013].
    #[arg(long)]
    pub run_latency: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn execute(args: SynthArgs) -> Result<()> {
    let kv = KeyValues::load(args.config.as_deref(), &keys(&[SYNTH_KEYS]))?;
    let out_dir: PathBuf = kv.required(args.out_dir, "out-dir")?;
    let d = SynthConfig::default();
    let config = SynthConfig {
        n_dialogues: kv.or_default(args.dialogues, "dialogues", d.n_dialogues)?,
        n_utterances: kv.or_default(args.utterances, "utterances", d.n_utterances)?,
        m: kv.or_default(args.m, "m", d.m)?,
        oos_fraction: kv.or_default(args.oos_fraction, "oos-fraction", d.oos_fraction)?,
        runs: kv.or_default(args.runs, "runs", d.runs)?,
        noise: kv.or_default(args.noise, "noise", d.noise)?,
        hit_rate: kv.or_default(args.hit_rate, "hit-rate", d.hit_rate)?,
        run_latency_seconds: kv.or_default(args.run_latency, "run-latency", d.run_latency_seconds)?,
        seed: kv.or_default(args.seed, "seed", d.seed)?,
    };
    if out_dir.exists() && !out_dir.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", out_dir.display())));
    }
    let out = generate(&config)?;

    let mut corpus = Vec::new();
    out.corpus.write_jsonl(&mut corpus)?;
    let mut log = Vec::new();
    write_ensemble_log(&out.log, &out.label_space, &mut log)?;
    let labels: String = out.label_space.in_scope().iter().map(|l| format!("{l}\n")).collect();

    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    fsio::write_atomic(&out_dir.join("corpus.jsonl"), &corpus)?;
    fsio::write_atomic(&out_dir.join("ensemble.jsonl"), &log)?;
    fsio::write_atomic(&out_dir.join("labels.txt"), labels.as_bytes())?;
    eprintln!(
        "wrote {} dialogues, {} utterances, {} runs each to {} (expected uncertain fraction {:.4})",
        config.n_dialogues,
        out.corpus.num_utterances(),
        config.runs,
        out_dir.display(),
        config.uncertain_fraction()
    );
    Ok(())
}
