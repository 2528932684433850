//! Brute-force reference implementations used by the property and
//! acceptance suites. Nothing here calls into the crate's algorithms.

#![allow(dead_code)]

/// Same slack the reduction rule documents for its cumulative comparison.
pub const MASS_SLACK: f64 = 1e-9;

/// Smallest descending-probability prefix whose sum reaches `p`, found by
/// summing every prefix from scratch. Ties rank by label index.
pub fn lsr_prefix(probs: &[f64], p: f64) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = probs.iter().copied().zip(0..).collect();
    // Selection sort keeps this independent of the library's comparator.
    for i in 0..ranked.len() {
        let mut best = i;
        for j in i + 1..ranked.len() {
            let (pj, ij) = ranked[j];
            let (pb, ib) = ranked[best];
            if pj > pb || (pj == pb && ij < ib) {
                best = j;
            }
        }
        ranked.swap(i, best);
    }
    for k in 1..=ranked.len() {
        let mass: f64 = ranked[..k].iter().map(|(q, _)| q).sum();
        if mass + MASS_SLACK >= p {
            return ranked[..k].iter().map(|(_, i)| *i).collect();
        }
    }
    ranked.iter().map(|(_, i)| *i).collect()
}

pub struct OracleIs {
    pub acc: f64,
    pub wf1: f64,
    pub wp: f64,
}

pub struct OracleFull {
    pub acc: f64,
    pub macro_f1: f64,
    pub f1_oos: f64,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Per-class precision, recall and F1 by scanning the examples once per class.
fn class_prf(preds: &[usize], golds: &[usize], class: usize) -> (f64, f64, f64, usize) {
    let mut tp = 0.0;
    let mut pred_pos = 0.0;
    let mut gold_pos = 0usize;
    for (&p, &g) in preds.iter().zip(golds) {
        if p == class {
            pred_pos += 1.0;
        }
        if g == class {
            gold_pos += 1;
            if p == class {
                tp += 1.0;
            }
        }
    }
    let precision = div(tp, pred_pos);
    let recall = div(tp, gold_pos as f64);
    let f1 = div(2.0 * precision * recall, precision + recall);
    (precision, recall, f1, gold_pos)
}

/// Labels are indices; `oos` is the out-of-scope index. Golds must be in scope.
pub fn is_metrics(preds: &[usize], golds: &[usize], n_classes: usize) -> OracleIs {
    let n = golds.len() as f64;
    let acc = preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / n;
    let (mut wf1, mut wp) = (0.0, 0.0);
    for c in 0..n_classes {
        let (precision, _, f1, support) = class_prf(preds, golds, c);
        wf1 += support as f64 / n * f1;
        wp += support as f64 / n * precision;
    }
    OracleIs { acc, wf1, wp }
}

/// Classes `0..n_classes` with `oos == n_classes - 1`.
pub fn full_metrics(preds: &[usize], golds: &[usize], n_classes: usize) -> OracleFull {
    let n = golds.len() as f64;
    let acc = preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / n;
    let mut f1s = Vec::new();
    for c in 0..n_classes {
        let seen = preds.contains(&c) || golds.contains(&c);
        if seen {
            f1s.push(class_prf(preds, golds, c).2);
        }
    }
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let f1_oos = class_prf(preds, golds, n_classes - 1).2;
    OracleFull { acc, macro_f1, f1_oos }
}

/// Sample standard deviation, two-pass.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
