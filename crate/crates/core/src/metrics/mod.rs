//! Memorization metrics and forgetting thresholds.
//!
//! * MA: fraction of predicted positions whose argmax is the true token.
//! * RMA: mean probability of the true token over predicted positions.
//! * EL_n: mean n-gram overlap between greedy continuations of every prefix
//!   and the true suffix.
//!
//! MA and RMA score the `T-1` transitions `x_{<=t} -> x_{t+1}`. The
//! [`Indexing::Literal`] mode instead scores `x_{<t} -> x_t` for
//! `t = 1..T-1`; with no start token the empty-context term is dropped,
//! leaving `T-2` positions (the last token is never scored).

mod overlap;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use overlap::{bleu, chrf, overlap_n, BLEU_FLOOR, BLEU_MAX_ORDER, CHRF_BETA, CHRF_MAX_ORDER};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::lm::{argmax, forward_logprobs, LanguageModel, LogProbs};

/// Default n-gram order for extraction likelihood on short sequences.
pub const DEFAULT_EL_ORDER: usize = 4;
/// The order used by the published reference thresholds.
pub const PAPER_EL_ORDER: usize = 10;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indexing {
    #[default]
    NextToken,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub el: f64,
    pub ma: f64,
    pub rma: f64,
    pub el_n: usize,
}

impl MetricTriple {
    pub fn in_range(&self) -> bool {
        [self.el, self.ma, self.rma].iter().all(|v| (0.0..=1.0).contains(v)) && self.el_n >= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingThresholds {
    pub el: f64,
    pub ma: f64,
    pub rma: f64,
    pub n: usize,
    pub source: String,
}

impl ForgettingThresholds {
    pub fn new(el: f64, ma: f64, rma: f64, n: usize, source: impl Into<String>) -> Result<Self> {
        let t = ForgettingThresholds { el, ma, rma, n, source: source.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.el, self.ma, self.rma].iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("thresholds must lie in [0, 1]"));
        }
        if self.n == 0 {
            return Err(Error::invalid("EL order must be at least 1"));
        }
        Ok(())
    }
}

impl fmt::Display for ForgettingThresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EL_{} {:.1}%  MA {:.1}%  RMA {:.1}%  ({})",
            self.n,
            100.0 * self.el,
            100.0 * self.ma,
            100.0 * self.rma,
            self.source
        )
    }
}

/// Which rows of the forward pass are scored, and against which targets.
fn scored_positions(x: &[u32], mode: Indexing) -> Result<(usize, &[u32])> {
    match mode {
        Indexing::NextToken => {
            if x.len() < 2 {
                return Err(Error::SequenceTooShort { len: x.len(), min: 2 });
            }
            Ok((x.len() - 1, &x[1..]))
        }
        Indexing::Literal => {
            if x.len() < 3 {
                return Err(Error::SequenceTooShort { len: x.len(), min: 3 });
            }
            Ok((x.len() - 2, &x[1..x.len() - 1]))
        }
    }
}

fn ma_from(lp: &LogProbs, x: &[u32], mode: Indexing) -> Result<f64> {
    let (rows, targets) = scored_positions(x, mode)?;
    let hits = lp.iter_rows().take(rows).zip(targets).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / rows as f64)
}

fn rma_from(lp: &LogProbs, x: &[u32], mode: Indexing) -> Result<f64> {
    let (rows, targets) = scored_positions(x, mode)?;
    let sum: f64 = lp.iter_rows().take(rows).zip(targets).map(|(row, &y)| row[y as usize].exp()).sum();
    Ok((sum / rows as f64).clamp(0.0, 1.0))
}

pub fn ma<M: LanguageModel + ?Sized>(model: &M, x: &[u32]) -> Result<f64> {
    ma_with(model, x, Indexing::NextToken)
}

pub fn ma_with<M: LanguageModel + ?Sized>(model: &M, x: &[u32], mode: Indexing) -> Result<f64> {
    scored_positions(x, mode)?;
    ma_from(&forward_logprobs(model, x)?, x, mode)
}

pub fn rma<M: LanguageModel + ?Sized>(model: &M, x: &[u32]) -> Result<f64> {
    rma_with(model, x, Indexing::NextToken)
}

pub fn rma_with<M: LanguageModel + ?Sized>(model: &M, x: &[u32], mode: Indexing) -> Result<f64> {
    scored_positions(x, mode)?;
    rma_from(&forward_logprobs(model, x)?, x, mode)
}

/// Mean over `t = 1..=T-n` of `overlap_n(greedy(x[..t], T-t), x[t..])`.
pub fn el_n<M: LanguageModel + ?Sized>(model: &M, x: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("EL order must be at least 1"));
    }
    if x.len() <= n {
        return Err(Error::SequenceTooShort { len: x.len(), min: n + 1 });
    }
    let gens = model.greedy_suffixes(x, 1..x.len() - n + 1)?;
    let sum: f64 = gens.iter().enumerate().map(|(i, g)| overlap_n(g, &x[i + 1..], n)).sum();
    Ok(sum / gens.len() as f64)
}

/// All three metrics for one sequence, sharing a single forward pass.
pub fn evaluate<M: LanguageModel + ?Sized>(model: &M, x: &[u32], n: usize) -> Result<MetricTriple> {
    let el = el_n(model, x, n)?;
    let lp = forward_logprobs(model, x)?;
    Ok(MetricTriple {
        el,
        ma: ma_from(&lp, x, Indexing::NextToken)?,
        rma: rma_from(&lp, x, Indexing::NextToken)?,
        el_n: n,
    })
}

/// Per-sequence metrics, in input order. Sequences are scored in parallel.
pub fn evaluate_set<M: LanguageModel + ?Sized>(model: &M, seqs: &[TokenSeq], n: usize) -> Result<Vec<MetricTriple>> {
    seqs.par_iter().map(|s| evaluate(model, &s.tokens, n)).collect()
}

/// Component-wise arithmetic mean, summed in input order.
pub fn mean_triple(triples: &[MetricTriple]) -> Result<MetricTriple> {
    let first = triples.first().ok_or_else(|| Error::invalid("cannot average an empty metric list"))?;
    if triples.iter().any(|t| t.el_n != first.el_n) {
        return Err(Error::invalid("cannot average metrics with different EL orders"));
    }
    let k = triples.len() as f64;
    let (mut el, mut ma, mut rma) = (0.0, 0.0, 0.0);
    for t in triples {
        el += t.el;
        ma += t.ma;
        rma += t.rma;
    }
    Ok(MetricTriple { el: el / k, ma: ma / k, rma: rma / k, el_n: first.el_n })
}

/// Thresholds are the mean metrics on sequences the model never saw.
///
/// Each sequence's metrics are computed independently and then averaged in
/// sorted order, so the result does not depend on the order of `heldout`.
pub fn compute_thresholds<M: LanguageModel + ?Sized>(
    model: &M,
    heldout: &[TokenSeq],
    n: usize,
    source: impl Into<String>,
) -> Result<ForgettingThresholds> {
    if heldout.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let mut triples = evaluate_set(model, heldout, n)?;
    triples.sort_by(|a, b| a.el.total_cmp(&b.el).then(a.ma.total_cmp(&b.ma)).then(a.rma.total_cmp(&b.rma)));
    let m = mean_triple(&triples)?;
    ForgettingThresholds::new(m.el, m.ma, m.rma, n, source)
}

#[derive(Deserialize)]
struct ReferenceFile {
    units: String,
    el_order: usize,
    models: BTreeMap<String, ReferenceRow>,
}

#[derive(Deserialize)]
struct ReferenceRow {
    el: f64,
    ma: f64,
    rma: f64,
}

const REFERENCE_JSON: &str = include_str!("reference_thresholds.json");

fn reference_file() -> ReferenceFile {
    let f: ReferenceFile = serde_json::from_str(REFERENCE_JSON).expect("bundled reference thresholds parse");
    assert_eq!(f.units, "percent");
    f
}

/// Names accepted by [`paper_reference`].
pub fn reference_models() -> Vec<String> {
    reference_file().models.into_keys().collect()
}

/// Published thresholds for a large pretrained model, converted from
/// percent to fractions. Lookup is case-insensitive.
pub fn paper_reference(model: &str) -> Result<ForgettingThresholds> {
    let f = reference_file();
    let key = model.to_ascii_lowercase();
    let row = f.models.get(&key).ok_or_else(|| {
        Error::invalid(format!(
            "unknown reference model {model:?}; expected one of {}",
            f.models.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    ForgettingThresholds::new(row.el / 100.0, row.ma / 100.0, row.rma / 100.0, f.el_order, format!("paper-reference:{key}"))
}
