//! Aggregation of several seeded classifier runs into a vote and an
//! uncertainty score.
//!
//! The uncertainty of an utterance is the sample standard deviation (divisor
//! `R - 1`) of the probability that each run assigned to the voted label. A
//! single run has uncertainty 0.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSpace, UtteranceKey};

/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {label:?} in probabilities")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: probability for {label:?} is {value}, outside [0, 1]")]
    OutOfRange { line: usize, label: String, value: f64 },
    #[error("line {line}: probabilities for {key} run {run_id} sum to {sum}")]
    BadSum {
        line: usize,
        key: UtteranceKey,
        run_id: usize,
        sum: f64,
    },
    #[error("line {line}: run_id {run_id} for {key} is outside [0, {expected})")]
    RunOutOfRange {
        line: usize,
        key: UtteranceKey,
        run_id: usize,
        expected: usize,
    },
    #[error("line {line}: duplicate run {run_id} for {key}")]
    DuplicateRun {
        line: usize,
        key: UtteranceKey,
        run_id: usize,
    },
    #[error("{key}: missing run(s) {missing:?} of {expected}")]
    MissingRuns {
        key: UtteranceKey,
        missing: Vec<usize>,
        expected: usize,
    },
    #[error("invalid ensemble record: {0}")]
    InvalidRecord(String),
}

/// One line of an ensemble log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLogLine {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub run_id: usize,
    pub probs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
}

/// All runs for one utterance. Each vector is aligned with the label space's
/// in-scope ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRecord {
    pub key: UtteranceKey,
    pub runs: Vec<Vec<f64>>,
    /// Per-run inference time in seconds; zero when the log does not record it.
    pub run_latencies: Vec<f64>,
}

impl EnsembleRecord {
    pub fn new(key: UtteranceKey, runs: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        let n = runs.len();
        Self::with_latencies(key, runs, vec![0.0; n])
    }

    pub fn with_latencies(
        key: UtteranceKey,
        runs: Vec<Vec<f64>>,
        run_latencies: Vec<f64>,
    ) -> Result<Self, EnsembleError> {
        let record = Self {
            key,
            runs,
            run_latencies,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn num_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn num_labels(&self) -> usize {
        self.runs.first().map_or(0, Vec::len)
    }

    /// Classifier cost charged to the utterance: every run counts.
    pub fn classifier_seconds(&self) -> f64 {
        self.run_latencies.iter().sum()
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let invalid = |msg: String| Err(EnsembleError::InvalidRecord(format!("{}: {msg}", self.key)));
        if self.runs.is_empty() {
            return invalid("no runs".into());
        }
        if self.run_latencies.len() != self.runs.len() {
            return invalid("latency count differs from run count".into());
        }
        let m = self.num_labels();
        if m == 0 {
            return invalid("empty probability vector".into());
        }
        for (r, run) in self.runs.iter().enumerate() {
            if run.len() != m {
                return invalid(format!("run {r} has {} labels, expected {m}", run.len()));
            }
            if run.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return invalid(format!("run {r} has a probability outside [0, 1]"));
            }
            let sum: f64 = run.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return invalid(format!("run {r} sums to {sum}"));
            }
        }
        if self.run_latencies.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return invalid("negative or non-finite latency".into());
        }
        Ok(())
    }
}

pub type EnsembleLog = BTreeMap<UtteranceKey, EnsembleRecord>;

pub fn load_ensemble_log(
    path: impl AsRef<Path>,
    label_space: &LabelSpace,
    expected_runs: usize,
) -> Result<EnsembleLog, EnsembleError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ensemble_log(&text, label_space, expected_runs)
}

// One run's probabilities and latency, filled in as lines arrive.
type RunSlot = (Vec<f64>, f64);

/// Labels missing from a line's `probs` map are read as probability 0.
pub fn parse_ensemble_log(
    text: &str,
    label_space: &LabelSpace,
    expected_runs: usize,
) -> Result<EnsembleLog, EnsembleError> {
    if expected_runs == 0 {
        return Err(EnsembleError::InvalidRecord("expected_runs must be at least 1".into()));
    }
    let m = label_space.m();
    let mut partial: BTreeMap<UtteranceKey, Vec<Option<RunSlot>>> = BTreeMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: EnsembleLogLine = serde_json::from_str(raw).map_err(|e| EnsembleError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let key = UtteranceKey::new(rec.dialogue_id, rec.turn_index);
        if rec.run_id >= expected_runs {
            return Err(EnsembleError::RunOutOfRange {
                line,
                key,
                run_id: rec.run_id,
                expected: expected_runs,
            });
        }
        let mut probs = vec![0.0; m];
        for (label, &value) in &rec.probs {
            let idx = label_space.index_of(label).ok_or_else(|| EnsembleError::UnknownLabel {
                line,
                label: label.clone(),
            })?;
            if !(0.0..=1.0).contains(&value) {
                return Err(EnsembleError::OutOfRange {
                    line,
                    label: label.clone(),
                    value,
                });
            }
            probs[idx] = value;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(EnsembleError::BadSum {
                line,
                key,
                run_id: rec.run_id,
                sum,
            });
        }
        let latency = rec.latency_seconds.unwrap_or(0.0);
        if !latency.is_finite() || latency < 0.0 {
            return Err(EnsembleError::Malformed {
                line,
                message: format!("latency_seconds {latency} must be finite and nonnegative"),
            });
        }
        let slots = partial.entry(key.clone()).or_insert_with(|| vec![None; expected_runs]);
        if slots[rec.run_id].is_some() {
            return Err(EnsembleError::DuplicateRun {
                line,
                key,
                run_id: rec.run_id,
            });
        }
        slots[rec.run_id] = Some((probs, latency));
    }

    // Iterated in key order so the first reported gap is stable.
    let mut log = EnsembleLog::new();
    for (key, slots) in partial {
        let missing: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_none().then_some(i))
            .collect();
        if !missing.is_empty() {
            return Err(EnsembleError::MissingRuns {
                key,
                missing,
                expected: expected_runs,
            });
        }
        let (runs, run_latencies) = slots.into_iter().flatten().unzip();
        log.insert(
            key.clone(),
            EnsembleRecord {
                key,
                runs,
                run_latencies,
            },
        );
    }
    Ok(log)
}

/// Serializes a log in the line-delimited format, one line per run.
pub fn write_ensemble_log<W: Write>(
    log: &EnsembleLog,
    label_space: &LabelSpace,
    mut out: W,
) -> std::io::Result<()> {
    for record in log.values() {
        for (run_id, (run, latency)) in record.runs.iter().zip(&record.run_latencies).enumerate() {
            let line = EnsembleLogLine {
                dialogue_id: record.key.dialogue_id.clone(),
                turn_index: record.key.turn_index,
                run_id,
                probs: label_space.in_scope().iter().cloned().zip(run.iter().copied()).collect(),
                latency_seconds: Some(*latency),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    /// Index of the voted label in the in-scope ordering.
    pub vote_index: usize,
    /// Number of runs whose argmax was each label.
    pub vote_counts: Vec<usize>,
    pub mean_probs: Vec<f64>,
    /// Sample standard deviation of the voted label's probability across runs.
    pub uncertainty: f64,
    /// Sample standard deviation of every label's probability, for inspection.
    pub per_class_std: Vec<f64>,
}

impl EnsembleSummary {
    pub fn vote_label<'a>(&self, label_space: &'a LabelSpace) -> &'a str {
        &label_space.in_scope()[self.vote_index]
    }
}

fn argmax(values: &[f64]) -> usize {
    // First maximum wins, i.e. ties go to the earlier label.
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_std(values: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Majority vote over run argmaxes. Ties go to the highest mean probability,
/// then to the earliest label.
pub fn summarize(record: &EnsembleRecord) -> EnsembleSummary {
    let m = record.num_labels();
    let r = record.num_runs() as f64;

    let mut vote_counts = vec![0usize; m];
    for run in &record.runs {
        vote_counts[argmax(run)] += 1;
    }

    let mut mean_probs = vec![0.0; m];
    for run in &record.runs {
        for (acc, p) in mean_probs.iter_mut().zip(run) {
            *acc += p;
        }
    }
    for p in &mut mean_probs {
        *p /= r;
    }

    let top = *vote_counts.iter().max().unwrap_or(&0);
    let mut vote_index = usize::MAX;
    for (i, &count) in vote_counts.iter().enumerate() {
        if count == top && (vote_index == usize::MAX || mean_probs[i] > mean_probs[vote_index]) {
            vote_index = i;
        }
    }

    let per_class_std: Vec<f64> = (0..m)
        .map(|j| sample_std(record.runs.iter().map(|run| run[j])))
        .collect();

    EnsembleSummary {
        vote_index,
        vote_counts,
        mean_probs,
        uncertainty: per_class_std[vote_index],
        per_class_std,
    }
}

/// True when the ensemble is too uncertain to trust: strictly above `sigma`.
pub fn is_uncertain(summary: &EnsembleSummary, sigma: f64) -> bool {
    summary.uncertainty > sigma
}

/// Standalone classifier decision: the out-of-scope token when uncertain,
/// the voted label otherwise.
pub fn decide_oos<'a>(summary: &EnsembleSummary, sigma: f64, label_space: &'a LabelSpace) -> &'a str {
    if is_uncertain(summary, sigma) {
        label_space.oos_token()
    } else {
        summary.vote_label(label_space)
    }
}

/// Cascade decision: whether the utterance goes to the LLM.
pub fn should_route(summary: &EnsembleSummary, sigma: f64) -> bool {
    is_uncertain(summary, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ls() -> LabelSpace {
        LabelSpace::with_default_oos(["a", "b", "c"]).unwrap()
    }

    fn key() -> UtteranceKey {
        UtteranceKey::new("d", 0)
    }

    // Vote-label probability p; the rest split over the other two labels.
    fn run_for(label: usize, p: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - p) / 2.0; 3];
        v[label] = p;
        v
    }

    fn summary_with_uncertainty(u: f64) -> EnsembleSummary {
        EnsembleSummary {
            vote_index: 1,
            vote_counts: vec![0, 5, 0],
            mean_probs: vec![0.1, 0.8, 0.1],
            uncertainty: u,
            per_class_std: vec![0.0, u, 0.0],
        }
    }

    #[test]
    fn clear_majority() {
        let runs = vec![
            run_for(0, 0.7),
            run_for(0, 0.7),
            run_for(1, 0.7),
            run_for(0, 0.7),
            run_for(2, 0.7),
        ];
        let s = summarize(&EnsembleRecord::new(key(), runs).unwrap());
        assert_eq!(s.vote_label(&ls()), "a");
        assert_eq!(s.vote_counts, [3, 1, 1]);
    }

    #[test]
    fn identical_runs_have_zero_uncertainty() {
        let runs = vec![run_for(1, 0.9); 5];
        let s = summarize(&EnsembleRecord::new(key(), runs).unwrap());
        assert_eq!(s.uncertainty, 0.0);
        assert_abs_diff_eq!(s.mean_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sample_std_of_vote_probability() {
        let runs = [0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&p| {
                let mut v = vec![0.0; 3];
                v[0] = p;
                v[1] = 1.0 - p;
                // keep label a the argmax in every run by tipping the rest to c
                if p < 0.5 {
                    v[1] = 0.0;
                    v[2] = 1.0 - p;
                    v[0] = p;
                }
                v
            })
            .collect::<Vec<_>>();
        // Hand-computed: mean 0.6, squared deviations sum to 0.4, /4 = 0.1.
        let expected = 0.1f64.sqrt();
        let s = sample_std([0.2, 0.4, 0.6, 0.8, 1.0].into_iter());
        assert_abs_diff_eq!(s, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.3162, epsilon = 5e-5);
        let rec = EnsembleRecord::new(key(), runs).unwrap();
        let summary = summarize(&rec);
        // a wins 3 runs (0.6, 0.8, 1.0); c wins 0.2 and 0.4 runs.
        assert_eq!(summary.vote_index, 0);
        assert_abs_diff_eq!(summary.uncertainty, expected, epsilon = 1e-12);
    }

    #[test]
    fn tie_broken_by_mean_then_order() {
        // a and b each win two runs; b has the larger mean.
        let runs = vec![
            vec![0.6, 0.4, 0.0],
            vec![0.6, 0.4, 0.0],
            vec![0.1, 0.9, 0.0],
            vec![0.1, 0.9, 0.0],
        ];
        let s = summarize(&EnsembleRecord::new(key(), runs).unwrap());
        assert_eq!(s.vote_index, 1);
        // Exact tie on counts and means: earliest label.
        let runs = vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
        let s = summarize(&EnsembleRecord::new(key(), runs).unwrap());
        assert_eq!(s.vote_index, 1);
    }

    #[test]
    fn single_run_is_certain() {
        let s = summarize(&EnsembleRecord::new(key(), vec![vec![0.2, 0.3, 0.5]]).unwrap());
        assert_eq!(s.uncertainty, 0.0);
        assert_eq!(s.vote_index, 2);
    }

    #[test]
    fn oos_decision_boundary() {
        let ls = ls();
        assert_eq!(decide_oos(&summary_with_uncertainty(0.05), 0.12, &ls), "b");
        assert_eq!(decide_oos(&summary_with_uncertainty(0.20), 0.12, &ls), "UNK");
        assert_eq!(decide_oos(&summary_with_uncertainty(0.12), 0.12, &ls), "b");
        assert_eq!(decide_oos(&summary_with_uncertainty(0.5), f64::INFINITY, &ls), "b");
        assert_eq!(decide_oos(&summary_with_uncertainty(0.0), -1.0, &ls), "UNK");
    }

    #[test]
    fn routing() {
        for sigma in [0.0, 0.1, 1.0] {
            assert!(!should_route(&summary_with_uncertainty(0.0), sigma));
        }
        assert!(should_route(&summary_with_uncertainty(0.2), 0.12));
        assert!(!should_route(&summary_with_uncertainty(0.12), 0.12));
    }

    fn line(d: &str, t: usize, run: usize, probs: &[(&str, f64)]) -> String {
        serde_json::to_string(&EnsembleLogLine {
            dialogue_id: d.into(),
            turn_index: t,
            run_id: run,
            probs: probs.iter().map(|(l, p)| (l.to_string(), *p)).collect(),
            latency_seconds: None,
        })
        .unwrap()
    }

    #[test]
    fn loads_complete_log() {
        let mut lines = Vec::new();
        for t in 0..3 {
            for r in 0..5 {
                lines.push(line("d", t, r, &[("a", 0.5), ("b", 0.25), ("c", 0.25)]));
            }
        }
        let log = parse_ensemble_log(&lines.join("\n"), &ls(), 5).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.values().all(|r| r.num_runs() == 5));
    }

    #[test]
    fn missing_run_names_key() {
        let lines: Vec<_> = (0..4).map(|r| line("d", 7, r, &[("a", 1.0)])).collect();
        let err = parse_ensemble_log(&lines.join("\n"), &ls(), 5).unwrap_err();
        assert!(matches!(err, EnsembleError::MissingRuns { ref missing, .. } if missing == &[4]));
        assert!(err.to_string().contains("d#7"));
    }

    #[test]
    fn bad_sum_reports_observed() {
        let text = line("d", 0, 0, &[("a", 0.5), ("b", 0.4)]);
        let err = parse_ensemble_log(&text, &ls(), 1).unwrap_err();
        match err {
            EnsembleError::BadSum { sum, .. } => assert_abs_diff_eq!(sum, 0.9, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_ensemble_log(&text, &ls(), 1).unwrap_err().to_string().contains("0.9"));
    }

    #[test]
    fn other_validation_errors() {
        let dup = [line("d", 0, 0, &[("a", 1.0)]), line("d", 0, 0, &[("a", 1.0)])].join("\n");
        assert!(matches!(
            parse_ensemble_log(&dup, &ls(), 2),
            Err(EnsembleError::DuplicateRun { line: 2, .. })
        ));
        let unknown = line("d", 0, 0, &[("zzz", 1.0)]);
        assert!(matches!(
            parse_ensemble_log(&unknown, &ls(), 1),
            Err(EnsembleError::UnknownLabel { .. })
        ));
        let oor = line("d", 0, 5, &[("a", 1.0)]);
        assert!(matches!(
            parse_ensemble_log(&oor, &ls(), 5),
            Err(EnsembleError::RunOutOfRange { .. })
        ));
        let oos = line("d", 0, 0, &[("UNK", 1.0)]);
        assert!(parse_ensemble_log(&oos, &ls(), 1).is_err());
    }
}
