//! Label space reduction: shrink the candidate intents offered to the LLM to
//! the smallest top-probability subset whose cumulative mass reaches `P`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSpace;

pub const DEFAULT_P: f64 = 0.85;

/// Slack on the cumulative-mass comparison, so float rounding in the running
/// sum cannot push a prefix that reaches `p` exactly over the edge.
pub const MASS_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LsrError {
    #[error("empty probability vector")]
    Empty,
    #[error("probability vector has {got} entries but the label space has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("P must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("{sets} reduced sets but {golds} gold labels")]
    Misaligned { sets: usize, golds: usize },
    #[error("no reduced sets to summarize")]
    NoSets,
}

/// The subset `K_i` offered to the LLM for one routed utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedLabelSet {
    /// Labels in descending probability, ties in label-space order.
    pub labels: Vec<String>,
    /// Cumulative probability covered by `labels`.
    pub mass: f64,
    pub p_threshold: f64,
}

impl ReducedLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// Indices of `probs` sorted by descending probability, ties by index.
pub fn rank_labels(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Length of the shortest descending prefix reaching mass `p`, with its mass.
/// Falls back to the whole vector if the total never reaches `p`.
pub fn cumulative_cutoff(probs: &[f64], order: &[usize], p: f64) -> (usize, f64) {
    let mut mass = 0.0;
    for (k, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass + MASS_EPSILON >= p {
            return (k + 1, mass);
        }
    }
    (order.len(), mass)
}

pub fn reduce_label_space(
    mean_probs: &[f64],
    label_space: &LabelSpace,
    p: f64,
) -> Result<ReducedLabelSet, LsrError> {
    if mean_probs.is_empty() {
        return Err(LsrError::Empty);
    }
    if mean_probs.len() != label_space.m() {
        return Err(LsrError::LengthMismatch {
            got: mean_probs.len(),
            expected: label_space.m(),
        });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(LsrError::BadThreshold(p));
    }
    let order = rank_labels(mean_probs);
    let (k, mass) = cumulative_cutoff(mean_probs, &order, p);
    Ok(ReducedLabelSet {
        labels: order[..k].iter().map(|&i| label_space.in_scope()[i].clone()).collect(),
        mass,
        p_threshold: p,
    })
}

/// Strategy for choosing which in-scope labels a routed prompt offers.
pub trait LabelSelector {
    fn select(&self, mean_probs: &[f64], label_space: &LabelSpace) -> Result<ReducedLabelSet, LsrError>;
}

/// The cumulative-probability rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeMass {
    pub p: f64,
}

impl Default for CumulativeMass {
    fn default() -> Self {
        Self { p: DEFAULT_P }
    }
}

impl LabelSelector for CumulativeMass {
    fn select(&self, mean_probs: &[f64], label_space: &LabelSpace) -> Result<ReducedLabelSet, LsrError> {
        reduce_label_space(mean_probs, label_space, self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionStats {
    /// Mean of `1 - |K_i| / m`.
    pub avg_reduction: f64,
    pub avg_set_size: f64,
}

pub fn reduction_stats(sets: &[ReducedLabelSet], m: usize) -> Result<ReductionStats, LsrError> {
    if sets.is_empty() {
        return Err(LsrError::NoSets);
    }
    let n = sets.len() as f64;
    let total_size: usize = sets.iter().map(ReducedLabelSet::len).sum();
    let avg_set_size = total_size as f64 / n;
    Ok(ReductionStats {
        avg_reduction: 1.0 - avg_set_size / m as f64,
        avg_set_size,
    })
}

/// Fraction of gold labels that survived into their reduced set.
///
/// Callers pass in-scope golds only; an out-of-scope gold never counts as a hit.
pub fn hit_rate(sets: &[ReducedLabelSet], golds: &[&str]) -> Result<f64, LsrError> {
    if sets.len() != golds.len() {
        return Err(LsrError::Misaligned {
            sets: sets.len(),
            golds: golds.len(),
        });
    }
    if sets.is_empty() {
        return Err(LsrError::NoSets);
    }
    let hits = sets.iter().zip(golds).filter(|(s, g)| s.contains(g)).count();
    Ok(hits as f64 / sets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> LabelSpace {
        LabelSpace::with_default_oos(["a", "b", "c", "d"]).unwrap()
    }

    fn set(labels: &[&str]) -> ReducedLabelSet {
        ReducedLabelSet {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            mass: 1.0,
            p_threshold: 0.85,
        }
    }

    #[test]
    fn worked_example() {
        let r = reduce_label_space(&[0.5, 0.3, 0.15, 0.05], &abcd(), 0.85).unwrap();
        assert_eq!(r.labels, ["a", "b", "c"]);
        assert!((r.mass - 0.95).abs() < 1e-12);
    }

    #[test]
    fn ordering_follows_probability() {
        let r = reduce_label_space(&[0.05, 0.15, 0.5, 0.3], &abcd(), 0.85).unwrap();
        assert_eq!(r.labels, ["c", "d", "b"]);
    }

    #[test]
    fn point_mass() {
        for p in [0.01, 0.5, 0.85, 1.0] {
            let r = reduce_label_space(&[0.0, 1.0, 0.0, 0.0], &abcd(), p).unwrap();
            assert_eq!(r.labels, ["b"]);
        }
    }

    #[test]
    fn full_mass_takes_everything() {
        let r = reduce_label_space(&[0.4, 0.3, 0.2, 0.1], &abcd(), 1.0).unwrap();
        assert_eq!(r.labels, ["a", "b", "c", "d"]);
    }

    #[test]
    fn exact_boundary_is_reached() {
        // 0.48 + 0.19 + 0.18 sums to 0.8499999999999999 in f64.
        assert!(0.48 + 0.19 + 0.18 < 0.85);
        let r = reduce_label_space(&[0.48, 0.19, 0.18, 0.15], &abcd(), 0.85).unwrap();
        assert_eq!(r.labels, ["a", "b", "c"]);
    }

    #[test]
    fn ties_use_label_order() {
        let r = reduce_label_space(&[0.25, 0.25, 0.25, 0.25], &abcd(), 0.5).unwrap();
        assert_eq!(r.labels, ["a", "b"]);
    }

    #[test]
    fn rejects_bad_input() {
        let ls = abcd();
        assert_eq!(reduce_label_space(&[], &ls, 0.5), Err(LsrError::Empty));
        assert!(matches!(
            reduce_label_space(&[1.0], &ls, 0.5),
            Err(LsrError::LengthMismatch { .. })
        ));
        assert_eq!(
            reduce_label_space(&[1.0, 0.0, 0.0, 0.0], &ls, 0.0),
            Err(LsrError::BadThreshold(0.0))
        );
        assert!(reduce_label_space(&[1.0, 0.0, 0.0, 0.0], &ls, 1.5).is_err());
    }

    #[test]
    fn stats() {
        let full = vec![set(&["a", "b", "c", "d", "e", "f", "g", "h"]); 3];
        assert_eq!(reduction_stats(&full, 8).unwrap().avg_reduction, 0.0);
        let singles = vec![set(&["a"]); 4];
        assert_eq!(reduction_stats(&singles, 8).unwrap().avg_reduction, 0.875);
        let mixed = vec![set(&["a", "b"]), set(&["a", "b", "c", "d"])];
        let s = reduction_stats(&mixed, 8).unwrap();
        assert_eq!(s.avg_reduction, 0.625);
        assert_eq!(s.avg_set_size, 3.0);
        assert_eq!(reduction_stats(&[], 8), Err(LsrError::NoSets));
    }

    #[test]
    fn hits() {
        let sets: Vec<_> = (0..10).map(|_| set(&["a", "b"])).collect();
        assert_eq!(hit_rate(&sets, &["a"; 10]).unwrap(), 1.0);
        assert_eq!(hit_rate(&sets, &["z"; 10]).unwrap(), 0.0);
        let mut golds = vec!["b"; 9];
        golds.push("c");
        assert_eq!(hit_rate(&sets, &golds).unwrap(), 0.9);
        assert!(matches!(hit_rate(&sets, &["a"]), Err(LsrError::Misaligned { .. })));
    }

    #[test]
    fn selector_matches_function() {
        let ls = abcd();
        let probs = [0.1, 0.6, 0.2, 0.1];
        assert_eq!(
            CumulativeMass { p: 0.7 }.select(&probs, &ls).unwrap(),
            reduce_label_space(&probs, &ls, 0.7).unwrap()
        );
    }
}
