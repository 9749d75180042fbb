use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

/// Zero-count BLEU precisions are replaced by this value.
pub const BLEU_FLOOR: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

fn counts<T: Hash + Eq + Clone>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Fraction of `a`'s n-grams (duplicates counted) that appear anywhere in
/// `b`. Zero when `a` is shorter than `n`.
pub fn overlap_n(a: &[u32], b: &[u32], n: usize) -> f64 {
    if n == 0 || a.len() < n {
        return 0.0;
    }
    let set: HashSet<&[u32]> = if b.len() >= n { b.windows(n).collect() } else { HashSet::new() };
    let total = a.len() - n + 1;
    let hits = a.windows(n).filter(|g| set.contains(g)).count();
    hits as f64 / total as f64
}

/// Clipped matches and hypothesis total for one n-gram order.
fn clipped<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = counts(hyp, n);
    let r = counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Sentence-level BLEU over token ids with orders 1 to 4.
///
/// Orders for which the hypothesis is too short to contain any n-gram are
/// left out of the geometric mean, so a short exact match still scores 1.
pub fn bleu(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::invalid("BLEU needs non-empty hypothesis and reference"));
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=BLEU_MAX_ORDER {
        let (matched, total) = clipped(hyp, reference, n);
        if total == 0 {
            continue;
        }
        let p = if matched == 0 { BLEU_FLOOR } else { matched as f64 / total as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp();
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Character n-gram F-score (beta 2, orders 1 to 6) with whitespace
/// removed before counting.
pub fn chrf(hyp: &str, reference: &str) -> Result<f64> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::invalid("chrF needs non-empty hypothesis and reference"));
    }
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if r.is_empty() {
        return Ok(if h.is_empty() { 1.0 } else { 0.0 });
    }
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0);
    for n in 1..=CHRF_MAX_ORDER {
        let ref_total = r.len().saturating_sub(n - 1);
        if ref_total == 0 {
            continue;
        }
        let (matched, hyp_total) = clipped(&h, &r, n);
        p_sum += if hyp_total == 0 { 0.0 } else { matched as f64 / hyp_total as f64 };
        r_sum += matched as f64 / ref_total as f64;
        orders += 1;
    }
    let p = p_sum / orders as f64;
    let rec = r_sum / orders as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    let denom = b2 * p + rec;
    Ok(if denom == 0.0 { 0.0 } else { (1.0 + b2) * p * rec / denom })
}
