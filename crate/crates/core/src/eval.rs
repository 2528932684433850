//! Classification metrics over decision logs, plus latency accounting.
//!
//! In-scope (IS) metrics use only utterances whose gold label is in scope:
//! accuracy, support-weighted F1 and support-weighted precision. IS+OOS
//! metrics use every utterance: accuracy, macro F1 over all classes seen in
//! gold or predictions, and F1 of the out-of-scope class.
//!
//! Undefined ratios (0/0) are scored 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, LabelSpace, UtteranceKey};
use crate::router::RoutingDecision;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    Empty,
    #[error("{preds} predictions but {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("in-scope metrics given an out-of-scope gold label at position {0}")]
    OosGold(usize),
    #[error("decision log has no entry for {0}")]
    MissingDecision(UtteranceKey),
    #[error("decision log entry {0} is not in the corpus")]
    ExtraDecision(UtteranceKey),
    #[error("duplicate decision for {0}")]
    DuplicateDecision(UtteranceKey),
    #[error("baseline latency must be positive, got {0}")]
    BadBaseline(f64),
}

/// How an out-of-scope prediction on an in-scope gold is scored in IS metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OosOnInScope {
    /// Counts as an error against the gold class.
    #[default]
    CountAsError,
    /// Dropped from the IS evaluation set.
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Gold occurrences (`tp + fn`).
    pub support: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        // 2tp / (2tp + fp + fn) equals the harmonic mean of P and R.
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Present in gold or predictions.
    pub fn observed(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-label counts over the full label space, in-scope labels first.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<ClassCounts>,
    pub correct: usize,
    pub total: usize,
}

impl Confusion {
    pub fn get(&self, label: &str) -> Option<&ClassCounts> {
        self.labels.iter().position(|l| l == label).map(|i| &self.counts[i])
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }
}

fn check_lengths(preds: &[&str], golds: &[&str]) -> Result<(), EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn confusion(preds: &[&str], golds: &[&str], label_space: &LabelSpace) -> Result<Confusion, EvalError> {
    check_lengths(preds, golds)?;
    let labels: Vec<String> = label_space.all().map(str::to_string).collect();
    let oos_index = label_space.m();
    let index = |label: &str| -> Result<usize, EvalError> {
        if label_space.is_oos(label) {
            Ok(oos_index)
        } else {
            label_space
                .index_of(label)
                .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))
        }
    };
    let mut counts = vec![ClassCounts::default(); labels.len()];
    let mut correct = 0;
    for (p, g) in preds.iter().zip(golds) {
        let (pi, gi) = (index(p)?, index(g)?);
        counts[gi].support += 1;
        if pi == gi {
            counts[gi].tp += 1;
            correct += 1;
        } else {
            counts[pi].fp += 1;
            counts[gi].fn_ += 1;
        }
    }
    Ok(Confusion {
        labels,
        counts,
        correct,
        total: preds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsMetrics {
    pub acc: f64,
    pub wf1: f64,
    pub wp: f64,
    pub n: usize,
}

/// Accuracy, weighted F1 and weighted precision over in-scope golds.
///
/// Weights are gold supports over in-scope classes. Out-of-scope predictions
/// are handled per `policy`; under [`OosOnInScope::CountAsError`] they add a
/// false negative to the gold class and a false positive to no in-scope class.
pub fn is_metrics(
    preds: &[&str],
    golds: &[&str],
    label_space: &LabelSpace,
    policy: OosOnInScope,
) -> Result<IsMetrics, EvalError> {
    check_lengths(preds, golds)?;
    if let Some(pos) = golds.iter().position(|g| label_space.is_oos(g)) {
        return Err(EvalError::OosGold(pos));
    }
    let (preds, golds): (Vec<&str>, Vec<&str>) = preds
        .iter()
        .zip(golds)
        .filter(|(p, _)| policy == OosOnInScope::CountAsError || !label_space.is_oos(p))
        .map(|(p, g)| (*p, *g))
        .unzip();
    let c = confusion(&preds, &golds, label_space)?;
    let n = c.total as f64;
    let (mut wf1, mut wp) = (0.0, 0.0);
    for counts in &c.counts[..label_space.m()] {
        let w = counts.support as f64 / n;
        wf1 += w * counts.f1();
        wp += w * counts.precision();
    }
    Ok(IsMetrics {
        acc: c.accuracy(),
        wf1,
        wp,
        n: c.total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullMetrics {
    pub acc: f64,
    pub macro_f1: f64,
    pub f1_oos: f64,
    pub oos_precision: f64,
    pub oos_recall: f64,
    pub n: usize,
}

pub fn full_metrics(preds: &[&str], golds: &[&str], label_space: &LabelSpace) -> Result<FullMetrics, EvalError> {
    let c = confusion(preds, golds, label_space)?;
    let observed: Vec<&ClassCounts> = c.counts.iter().filter(|k| k.observed()).collect();
    let macro_f1 = observed.iter().map(|k| k.f1()).sum::<f64>() / observed.len() as f64;
    let oos = &c.counts[label_space.m()];
    Ok(FullMetrics {
        acc: c.accuracy(),
        macro_f1,
        f1_oos: oos.f1(),
        oos_precision: oos.precision(),
        oos_recall: oos.recall(),
        n: c.total,
    })
}

/// Gold labels for each decision, checking that the log covers the corpus
/// exactly once.
pub fn align<'a>(decisions: &'a [RoutingDecision], corpus: &'a Corpus) -> Result<Vec<(&'a str, &'a str)>, EvalError> {
    let mut golds: HashMap<UtteranceKey, &str> = corpus.utterances().map(|u| (u.key(), u.gold_intent.as_str())).collect();
    let mut pairs = Vec::with_capacity(decisions.len());
    let mut seen = std::collections::HashSet::new();
    for d in decisions {
        let key = d.key();
        if !seen.insert(key.clone()) {
            return Err(EvalError::DuplicateDecision(key));
        }
        let gold = golds.remove(&key).ok_or(EvalError::ExtraDecision(key))?;
        pairs.push((d.final_label.as_str(), gold));
    }
    if let Some(missing) = corpus.utterances().map(|u| u.key()).find(|k| golds.contains_key(k)) {
        return Err(EvalError::MissingDecision(missing));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub is_acc: f64,
    pub is_wf1: f64,
    pub is_wp: f64,
    pub full_acc: f64,
    pub full_macro_f1: f64,
    pub f1_oos: f64,
    pub oos_precision: f64,
    pub oos_recall: f64,
    pub support_per_label: BTreeMap<String, usize>,
    pub n_is: usize,
    pub n_total: usize,
}

pub fn evaluate_pairs(
    pairs: &[(&str, &str)],
    label_space: &LabelSpace,
    policy: OosOnInScope,
) -> Result<EvalReport, EvalError> {
    let (preds, golds): (Vec<&str>, Vec<&str>) = pairs.iter().copied().unzip();
    let full = full_metrics(&preds, &golds, label_space)?;
    let (is_preds, is_golds): (Vec<&str>, Vec<&str>) = pairs
        .iter()
        .filter(|(_, g)| !label_space.is_oos(g))
        .copied()
        .unzip();
    let is = is_metrics(&is_preds, &is_golds, label_space, policy)?;
    let mut support_per_label: BTreeMap<String, usize> = label_space.all().map(|l| (l.to_string(), 0)).collect();
    for g in &golds {
        *support_per_label.get_mut(*g).expect("gold validated by confusion") += 1;
    }
    Ok(EvalReport {
        is_acc: is.acc,
        is_wf1: is.wf1,
        is_wp: is.wp,
        full_acc: full.acc,
        full_macro_f1: full.macro_f1,
        f1_oos: full.f1_oos,
        oos_precision: full.oos_precision,
        oos_recall: full.oos_recall,
        support_per_label,
        n_is: is_golds.len(),
        n_total: full.n,
    })
}

pub fn evaluate(
    decisions: &[RoutingDecision],
    corpus: &Corpus,
    label_space: &LabelSpace,
    policy: OosOnInScope,
) -> Result<EvalReport, EvalError> {
    evaluate_pairs(&align(decisions, corpus)?, label_space, policy)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl EvalReport {
    /// Metrics in percent, two decimals, one per row.
    pub fn to_table(&self) -> String {
        let rows = [
            ("IS ACC", self.is_acc),
            ("IS WF1", self.is_wf1),
            ("IS WP", self.is_wp),
            ("IS+OOS ACC", self.full_acc),
            ("IS+OOS F1", self.full_macro_f1),
            ("F1-OOS", self.f1_oos),
            ("OOS precision", self.oos_precision),
            ("OOS recall", self.oos_recall),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<14} {:>7}", pct(value));
        }
        let _ = writeln!(out, "{:<14} {:>7}", "n (IS)", self.n_is);
        let _ = writeln!(out, "{:<14} {:>7}", "n (total)", self.n_total);
        out
    }

    /// `key=value` lines with raw fractions.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("is_acc", self.is_acc),
            ("is_wf1", self.is_wf1),
            ("is_wp", self.is_wp),
            ("full_acc", self.full_acc),
            ("full_macro_f1", self.full_macro_f1),
            ("f1_oos", self.f1_oos),
            ("oos_precision", self.oos_precision),
            ("oos_recall", self.oos_recall),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "n_is={}", self.n_is);
        let _ = writeln!(out, "n_total={}", self.n_total);
        for (label, n) in &self.support_per_label {
            let _ = writeln!(out, "support.{label}={n}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub avg_latency_seconds: f64,
    pub avg_classifier_seconds: f64,
    pub avg_llm_seconds: f64,
    pub llm_calls: usize,
    /// Average latency over the baseline's; `None` without a baseline.
    pub latency_ratio: Option<f64>,
}

pub fn latency_ratio(avg: f64, baseline_avg: f64) -> Result<f64, EvalError> {
    if baseline_avg.is_nan() || baseline_avg <= 0.0 {
        return Err(EvalError::BadBaseline(baseline_avg));
    }
    Ok(avg / baseline_avg)
}

pub fn average_latency(decisions: &[RoutingDecision]) -> Result<f64, EvalError> {
    if decisions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(decisions.iter().map(|d| d.latency.total()).sum::<f64>() / decisions.len() as f64)
}

pub fn latency_stats(decisions: &[RoutingDecision], baseline_avg: Option<f64>) -> Result<LatencyReport, EvalError> {
    let avg = average_latency(decisions)?;
    let n = decisions.len() as f64;
    Ok(LatencyReport {
        avg_latency_seconds: avg,
        avg_classifier_seconds: decisions.iter().map(|d| d.latency.classifier_seconds).sum::<f64>() / n,
        avg_llm_seconds: decisions.iter().map(|d| d.latency.llm_seconds).sum::<f64>() / n,
        llm_calls: decisions.iter().filter(|d| d.called_llm()).count(),
        latency_ratio: baseline_avg.map(|b| latency_ratio(avg, b)).transpose()?,
    })
}

impl LatencyReport {
    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "avg_latency_seconds={}\navg_classifier_seconds={}\navg_llm_seconds={}\nllm_calls={}\n",
            self.avg_latency_seconds, self.avg_classifier_seconds, self.avg_llm_seconds, self.llm_calls
        );
        if let Some(r) = self.latency_ratio {
            let _ = writeln!(out, "latency_ratio={r}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ab() -> LabelSpace {
        LabelSpace::with_default_oos(["a", "b"]).unwrap()
    }

    #[test]
    fn all_correct_has_no_errors() {
        let labels = ["a", "b", "UNK", "a"];
        let c = confusion(&labels, &labels, &ab()).unwrap();
        assert!(c.counts.iter().all(|k| k.fp == 0 && k.fn_ == 0));
        assert_eq!(c.accuracy(), 1.0);
    }

    #[test]
    fn single_error() {
        let c = confusion(&["b"], &["a"], &ab()).unwrap();
        assert_eq!(c.get("b").unwrap().fp, 1);
        assert_eq!(c.get("a").unwrap().fn_, 1);
        assert_eq!(c.get("UNK").unwrap(), &ClassCounts::default());
    }

    #[test]
    fn six_example_hand_tally() {
        // gold:  a  a  b  b   UNK UNK
        // pred:  a  b  b  UNK UNK a
        let golds = ["a", "a", "b", "b", "UNK", "UNK"];
        let preds = ["a", "b", "b", "UNK", "UNK", "a"];
        let c = confusion(&preds, &golds, &ab()).unwrap();
        let expect = |tp, fp, fn_, support| ClassCounts { tp, fp, fn_, support };
        assert_eq!(c.get("a").unwrap(), &expect(1, 1, 1, 2));
        assert_eq!(c.get("b").unwrap(), &expect(1, 1, 1, 2));
        assert_eq!(c.get("UNK").unwrap(), &expect(1, 1, 1, 2));
        assert_eq!(c.correct, 3);
    }

    #[test]
    fn two_class_weighted() {
        let m = is_metrics(&["a", "b", "b", "b"], &["a", "a", "b", "b"], &ab(), OosOnInScope::CountAsError).unwrap();
        assert_abs_diff_eq!(m.acc, 0.75, epsilon = 1e-12);
        // F1: a = 2/3, b = 0.8; precision: a = 1, b = 2/3; equal supports.
        assert_abs_diff_eq!(m.wf1, (2.0 / 3.0 + 0.8) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.wp, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_eq!(format!("{:.4}", m.wf1), "0.7333");
        assert_eq!(format!("{:.4}", m.wp), "0.8333");
    }

    #[test]
    fn perfect_scores() {
        let g = ["a", "b", "a"];
        let m = is_metrics(&g, &g, &ab(), OosOnInScope::CountAsError).unwrap();
        assert_eq!((m.acc, m.wf1, m.wp), (1.0, 1.0, 1.0));
        let g = ["a", "b", "UNK"];
        let f = full_metrics(&g, &g, &ab()).unwrap();
        assert_eq!((f.acc, f.macro_f1, f.f1_oos), (1.0, 1.0, 1.0));
    }

    #[test]
    fn oos_prediction_on_in_scope_gold() {
        let golds = ["a", "a", "b", "b", "a"];
        let right = ["a", "a", "b", "b", "a"];
        let one_unk = ["a", "a", "b", "b", "UNK"];
        let base = is_metrics(&right, &golds, &ab(), OosOnInScope::CountAsError).unwrap();
        let m = is_metrics(&one_unk, &golds, &ab(), OosOnInScope::CountAsError).unwrap();
        assert_abs_diff_eq!(base.acc - m.acc, 1.0 / 5.0, epsilon = 1e-12);
        // Precision of the in-scope classes is untouched.
        assert_abs_diff_eq!(m.wp, 1.0, epsilon = 1e-12);
        let ex = is_metrics(&one_unk, &golds, &ab(), OosOnInScope::Exclude).unwrap();
        assert_eq!(ex.n, 4);
        assert_eq!(ex.acc, 1.0);
    }

    #[test]
    fn is_metrics_contract() {
        assert_eq!(
            is_metrics(&[], &[], &ab(), OosOnInScope::CountAsError),
            Err(EvalError::Empty)
        );
        assert_eq!(
            is_metrics(&["a"], &["UNK"], &ab(), OosOnInScope::CountAsError),
            Err(EvalError::OosGold(0))
        );
        assert!(matches!(
            confusion(&["a"], &["zzz"], &ab()),
            Err(EvalError::UnknownLabel(_))
        ));
    }

    #[test]
    fn no_oos_predicted() {
        let f = full_metrics(&["a", "b", "a"], &["a", "b", "UNK"], &ab()).unwrap();
        assert_eq!(f.f1_oos, 0.0);
        assert_eq!(f.oos_recall, 0.0);
    }

    #[test]
    fn three_class_full() {
        // Per-class by hand:
        //   a: tp 2, fp 1, fn 0 -> F1 4/5
        //   b: tp 1, fp 0, fn 1 -> F1 2/3
        //   UNK: tp 1, fp 1, fn 1 -> F1 1/2
        let golds = ["a", "a", "b", "b", "UNK", "UNK"];
        let preds = ["a", "a", "b", "UNK", "UNK", "a"];
        let f = full_metrics(&preds, &golds, &ab()).unwrap();
        assert_abs_diff_eq!(f.acc, 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.macro_f1, (0.8 + 2.0 / 3.0 + 0.5) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.f1_oos, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn unobserved_class_skipped_in_macro() {
        let ls = LabelSpace::with_default_oos(["a", "b", "c"]).unwrap();
        let f = full_metrics(&["a", "b"], &["a", "b"], &ls).unwrap();
        assert_eq!(f.macro_f1, 1.0);
    }

    #[test]
    fn table_three_ratios() {
        for (avg, base, reported) in [(0.065, 1.925, 0.034), (1.100, 1.925, 0.571), (0.065, 4.039, 0.016)] {
            let r = latency_ratio(avg, base).unwrap();
            assert_eq!(format!("{r:.3}"), format!("{reported:.3}"));
        }
        // 2.236 / 4.039 = 0.55360 rounds to 0.554. The averages are themselves
        // rounded, so the true ratio lies in [2.2355/4.0395, 2.2365/4.0385],
        // which overlaps the interval that rounds to 0.553.
        let r = latency_ratio(2.236, 4.039).unwrap();
        assert_eq!(format!("{r:.3}"), "0.554");
        let (lo, hi) = (2.2355 / 4.0395, 2.2365 / 4.0385);
        assert!(lo < 0.5535 && hi >= 0.5525);
        assert_eq!(latency_ratio(1.0, 0.0), Err(EvalError::BadBaseline(0.0)));
    }
}
