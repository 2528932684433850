//! Seeded synthetic corpora with matching ensemble logs.
//!
//! Each utterance is one of:
//!
//! * confident: every run puts 0.80..0.90 on the same label (the gold, or a
//!   wrong label with probability `noise.confident_error`), so the
//!   vote-label spread stays below 0.06;
//! * uncertain: runs split between two candidate labels, the winner taking
//!   0.70..0.80 and the runner-up the rest of a 0.90..0.96 candidate mass.
//!   The vote-label spread is then at least 0.24, and at `P <= 0.90` the
//!   reduced set is exactly the two candidates. An in-scope gold is one of
//!   the candidates with probability `hit_rate`.
//!
//! Out-of-scope utterances are always uncertain. Generation needs `m >= 3`
//! and, when anything is uncertain, at least two runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, LabelSpace, Utterance, UtteranceKey, DEFAULT_OOS_TOKEN};
use crate::ensemble::{EnsembleLog, EnsembleRecord};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Fraction of in-scope utterances whose runs disagree.
    pub uncertain_in_scope: f64,
    /// Fraction of confident in-scope utterances voted to a wrong label.
    pub confident_error: f64,
}

impl NoiseProfile {
    pub const NONE: NoiseProfile = NoiseProfile {
        uncertain_in_scope: 0.0,
        confident_error: 0.0,
    };
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            uncertain_in_scope: 0.15,
            confident_error: 0.02,
        }
    }
}

impl fmt::Display for NoiseProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "uncertain={},error={}", self.uncertain_in_scope, self.confident_error)
    }
}

/// Parses `none`, `default`, or `uncertain=<f>,error=<f>` (either key optional).
impl FromStr for NoiseProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" | "0" => return Ok(NoiseProfile::NONE),
            "default" => return Ok(NoiseProfile::default()),
            _ => {}
        }
        let mut profile = NoiseProfile::NONE;
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in noise profile, got {part:?}"))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("noise {k}: {e}"))?;
            match k.trim() {
                "uncertain" => profile.uncertain_in_scope = v,
                "error" => profile.confident_error = v,
                other => return Err(format!("unknown noise key {other:?}")),
            }
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub n_utterances: usize,
    pub m: usize,
    pub oos_fraction: f64,
    pub runs: usize,
    pub noise: NoiseProfile,
    pub hit_rate: f64,
    /// Mean per-run classifier latency in seconds.
    pub run_latency_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_dialogues: 29,
            n_utterances: 768,
            m: 8,
            oos_fraction: 0.22,
            runs: 5,
            noise: NoiseProfile::default(),
            hit_rate: 0.93,
            run_latency_seconds: 0.013,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Expected share of utterances whose runs disagree.
    pub fn uncertain_fraction(&self) -> f64 {
        self.oos_fraction + (1.0 - self.oos_fraction) * self.noise.uncertain_in_scope
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::Config(msg.to_string()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_dialogues == 0 {
            return bad("n_dialogues must be at least 1");
        }
        if self.n_utterances < self.n_dialogues {
            return bad("n_utterances must be at least n_dialogues");
        }
        if self.m < 3 {
            return bad("m must be at least 3");
        }
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if !unit(self.oos_fraction)
            || !unit(self.hit_rate)
            || !unit(self.noise.uncertain_in_scope)
            || !unit(self.noise.confident_error)
        {
            return bad("fractions must lie in [0, 1]");
        }
        if self.runs < 2 && self.uncertain_fraction() > 0.0 {
            return bad("uncertain utterances need at least 2 runs");
        }
        if !(self.run_latency_seconds >= 0.0 && self.run_latency_seconds.is_finite()) {
            return bad("run latency must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace::new((1..=self.m).map(|i| format!("intent_{i}")), DEFAULT_OOS_TOKEN)
            .expect("generated labels are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Confident { correct: bool },
    /// `gold_offered` is whether the in-scope gold is a candidate label.
    Uncertain { gold_offered: bool },
    OutOfScope,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub label_space: LabelSpace,
    pub corpus: Corpus,
    pub log: EnsembleLog,
    pub kinds: BTreeMap<UtteranceKey, SynthKind>,
}

const WORDS: &[&str] = &[
    "can", "we", "move", "the", "meeting", "please", "where", "is", "lunch", "thanks", "hello", "who",
    "table", "order", "coffee", "help", "room", "today", "later", "okay", "show", "me", "your", "plan",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(3..=9);
    let mut words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    if rng.gen_bool(0.3) {
        words.push("?");
    }
    words.join(" ")
}

// Spreads `mass` over `slots` labels with random positive weights.
fn spread(rng: &mut ChaCha8Rng, probs: &mut [f64], slots: &[usize], mass: f64) {
    if slots.is_empty() {
        return;
    }
    let weights: Vec<f64> = slots.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (&i, w) in slots.iter().zip(weights) {
        probs[i] += mass * w / total;
    }
}

fn others(m: usize, exclude: &[usize]) -> Vec<usize> {
    (0..m).filter(|i| !exclude.contains(i)).collect()
}

fn pick_other(rng: &mut ChaCha8Rng, m: usize, exclude: &[usize]) -> usize {
    *others(m, exclude).choose(rng).expect("m >= 3 leaves a label")
}

fn confident_runs(rng: &mut ChaCha8Rng, m: usize, runs: usize, peak: usize) -> Vec<Vec<f64>> {
    let rest = others(m, &[peak]);
    (0..runs)
        .map(|_| {
            let mut probs = vec![0.0; m];
            let top = rng.gen_range(0.80..0.90);
            probs[peak] = top;
            spread(rng, &mut probs, &rest, 1.0 - top);
            probs
        })
        .collect()
}

fn uncertain_runs(rng: &mut ChaCha8Rng, m: usize, runs: usize, first: usize, second: usize) -> Vec<Vec<f64>> {
    let rest = others(m, &[first, second]);
    let mut winners: Vec<usize> = (0..runs).map(|r| if r < runs.div_ceil(2) { first } else { second }).collect();
    winners.shuffle(rng);
    winners
        .into_iter()
        .map(|winner| {
            let loser = if winner == first { second } else { first };
            let mut probs = vec![0.0; m];
            let mass = rng.gen_range(0.90..0.96);
            let top = rng.gen_range(0.70..0.80);
            probs[winner] = top;
            probs[loser] = mass - top;
            spread(rng, &mut probs, &rest, 1.0 - mass);
            probs
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let label_space = config.label_space();
    let m = config.m;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let base = config.n_utterances / config.n_dialogues;
    let extra = config.n_utterances % config.n_dialogues;
    let width = config.n_dialogues.to_string().len().max(3);

    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    let mut log = EnsembleLog::new();
    let mut kinds = BTreeMap::new();

    for d in 0..config.n_dialogues {
        let id = format!("dlg-{d:0width$}");
        let len = base + usize::from(d < extra);
        let mut utterances = Vec::with_capacity(len);
        for t in 0..len {
            let is_oos = rng.gen_bool(config.oos_fraction);
            let gold = rng.gen_range(0..m);
            let (kind, runs) = if is_oos {
                let first = rng.gen_range(0..m);
                let second = pick_other(&mut rng, m, &[first]);
                (SynthKind::OutOfScope, uncertain_runs(&mut rng, m, config.runs, first, second))
            } else if rng.gen_bool(config.noise.uncertain_in_scope) {
                let gold_offered = rng.gen_bool(config.hit_rate);
                let (first, second) = if gold_offered {
                    let other = pick_other(&mut rng, m, &[gold]);
                    if rng.gen_bool(0.5) {
                        (gold, other)
                    } else {
                        (other, gold)
                    }
                } else {
                    let first = pick_other(&mut rng, m, &[gold]);
                    (first, pick_other(&mut rng, m, &[gold, first]))
                };
                (
                    SynthKind::Uncertain { gold_offered },
                    uncertain_runs(&mut rng, m, config.runs, first, second),
                )
            } else {
                let correct = !rng.gen_bool(config.noise.confident_error);
                let peak = if correct { gold } else { pick_other(&mut rng, m, &[gold]) };
                (SynthKind::Confident { correct }, confident_runs(&mut rng, m, config.runs, peak))
            };
            let latencies: Vec<f64> = (0..config.runs)
                .map(|_| config.run_latency_seconds * rng.gen_range(0.8..1.2))
                .collect();
            let utterance = Utterance {
                dialogue_id: id.clone(),
                turn_index: t,
                speaker: format!("speaker_{}", rng.gen_range(1..=3)),
                text: sentence(&mut rng),
                gold_intent: if is_oos {
                    label_space.oos_token().to_string()
                } else {
                    label_space.in_scope()[gold].clone()
                },
            };
            let key = utterance.key();
            let record = EnsembleRecord::with_latencies(key.clone(), runs, latencies)
                .expect("generated runs are valid distributions");
            log.insert(key.clone(), record);
            kinds.insert(key, kind);
            utterances.push(utterance);
        }
        dialogues.push(Dialogue { id, utterances });
    }

    Ok(SynthOutput {
        label_space,
        corpus: Corpus { dialogues },
        log,
        kinds,
    })
}
