//! Batch and sequential unlearning with metric-gated stopping.
//!
//! An unlearning run evaluates the forget batch once before any update
//! (epoch 0), then alternates one pass of optimizer steps over the forget
//! batch with a fresh evaluation, until the forget-set metrics fall below
//! the thresholds or the epoch cap is hit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::lm::{argmax, forward_logprobs, AdamConfig, Grads, LanguageModel, ModelParams, OptimizerState};
use crate::losses::{pop_grad, LossBreakdown, Method};
use crate::metrics::{evaluate_set, mean_triple, ForgettingThresholds, MetricTriple, DEFAULT_EL_ORDER, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// The forget-set means must each be below threshold.
    #[default]
    SetAverage,
    /// Every forget sequence must individually be below all thresholds.
    PerSequence,
}

/// Which metrics the stop rule requires to be below threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetrics {
    #[default]
    All,
    El,
    Ma,
    Rma,
}

/// The frozen reference model for the retain loss in sequential runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPolicy {
    /// The model as it enters each batch.
    #[default]
    PerBatch,
    /// The model before the first batch, for every batch.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lambda: f64,
    pub lr: f64,
    pub forget_batch_size: usize,
    pub retain_sample_size: usize,
    pub el_order: usize,
    pub stop_mode: StopMode,
    pub stop_metrics: StopMetrics,
    pub max_epochs: usize,
    pub seed: u64,
    pub teacher: TeacherPolicy,
    pub reset_optimizer: bool,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Pop,
            lambda: 1.0,
            lr: 1e-4,
            forget_batch_size: 32,
            retain_sample_size: 32,
            el_order: DEFAULT_EL_ORDER,
            stop_mode: StopMode::SetAverage,
            stop_metrics: StopMetrics::All,
            max_epochs: 200,
            seed: 0,
            teacher: TeacherPolicy::PerBatch,
            reset_optimizer: true,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.forget_batch_size == 0 || self.retain_sample_size == 0 || self.el_order == 0 {
            return Err(Error::invalid("max_epochs, batch sizes and el_order must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn uses_retain(&self) -> bool {
        self.method != Method::Ul && self.lambda != 0.0
    }
}

/// Held-out language-modeling quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub perplexity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss of the epoch's last update; absent for the pre-update evaluation.
    pub loss: Option<LossBreakdown>,
    pub forget: MetricTriple,
    pub per_sequence: Vec<MetricTriple>,
    pub retention: Retention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ThresholdsMet,
    EpochCap,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub config: UnlearnConfig,
    pub thresholds: ForgettingThresholds,
    pub forget_ids: Vec<String>,
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

/// One CSV row per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss_total: Option<f64>,
    pub loss_asc: Option<f64>,
    pub loss_ret: Option<f64>,
    pub el: f64,
    pub ma: f64,
    pub rma: f64,
    pub heldout_ppl: f64,
    pub heldout_acc: f64,
}

pub const TRACE_COLUMNS: [&str; 9] =
    ["epoch", "loss_total", "loss_asc", "loss_ret", "el", "ma", "rma", "heldout_ppl", "heldout_acc"];

impl EpochRecord {
    pub fn is_finite(&self) -> bool {
        let finite = |m: &MetricTriple| m.el.is_finite() && m.ma.is_finite() && m.rma.is_finite();
        finite(&self.forget)
            && self.per_sequence.iter().all(finite)
            && self.retention.perplexity.is_finite()
            && self.retention.accuracy.is_finite()
            && self.loss.map_or(true, |l| l.is_finite())
    }
}

impl UnlearnTrace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a trace always holds the initial evaluation")
    }

    /// Number of optimizer epochs performed.
    pub fn epochs(&self) -> usize {
        self.last().epoch
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        self.records
            .iter()
            .map(|r| TraceRow {
                epoch: r.epoch,
                loss_total: r.loss.map(|l| l.total),
                loss_asc: r.loss.map(|l| l.asc),
                loss_ret: r.loss.map(|l| l.ret),
                el: r.forget.el,
                ma: r.forget.ma,
                rma: r.forget.rma,
                heldout_ppl: r.retention.perplexity,
                heldout_acc: r.retention.accuracy,
            })
            .collect()
    }
}

fn below(m: &MetricTriple, t: &ForgettingThresholds, which: StopMetrics) -> bool {
    match which {
        StopMetrics::All => m.el < t.el && m.ma < t.ma && m.rma < t.rma,
        StopMetrics::El => m.el < t.el,
        StopMetrics::Ma => m.ma < t.ma,
        StopMetrics::Rma => m.rma < t.rma,
    }
}

/// True when all three forget-set metrics are strictly below threshold.
pub fn stop_predicate(record: &EpochRecord, thresholds: &ForgettingThresholds, mode: StopMode) -> bool {
    stop_predicate_on(record, thresholds, mode, StopMetrics::All)
}

pub fn stop_predicate_on(
    record: &EpochRecord,
    thresholds: &ForgettingThresholds,
    mode: StopMode,
    which: StopMetrics,
) -> bool {
    match mode {
        StopMode::SetAverage => below(&record.forget, thresholds, which),
        StopMode::PerSequence => record.per_sequence.iter().all(|m| below(m, thresholds, which)),
    }
}

/// Perplexity is `exp` of the mean per-token NLL pooled over all held-out
/// predictions; accuracy is the mean MA.
pub fn retention_probe<M: LanguageModel + ?Sized>(model: &M, heldout: &[TokenSeq]) -> Result<Retention> {
    if heldout.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let floor = PROB_FLOOR.ln();
    let (mut nll, mut count, mut acc) = (0.0, 0usize, 0.0);
    for x in heldout {
        let lp = forward_logprobs(model, &x.tokens)?;
        let mut hits = 0;
        for (row, &y) in lp.iter_rows().zip(&x.tokens[1..]) {
            nll -= row[y as usize].max(floor);
            hits += usize::from(argmax(row) == y);
        }
        count += lp.rows();
        acc += hits as f64 / lp.rows() as f64;
    }
    Ok(Retention { perplexity: (nll / count as f64).exp().max(1.0), accuracy: acc / heldout.len() as f64 })
}

/// Forget-set metrics and held-out retention of `model`, as one trace record.
pub fn evaluate_epoch<M: LanguageModel + ?Sized>(
    model: &M,
    epoch: usize,
    loss: Option<LossBreakdown>,
    forget: &[TokenSeq],
    heldout: &[TokenSeq],
    n: usize,
) -> Result<EpochRecord> {
    let per_sequence = evaluate_set(model, forget, n)?;
    Ok(EpochRecord {
        epoch,
        loss,
        forget: mean_triple(&per_sequence)?,
        per_sequence,
        retention: retention_probe(model, heldout)?,
    })
}

/// Draws retain mini-batches without replacement, reshuffling the pool each
/// epoch and whenever it runs out.
struct RetainSampler<'a> {
    pool: &'a [TokenSeq],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> RetainSampler<'a> {
    fn new(pool: &'a [TokenSeq], seed: u64) -> Self {
        RetainSampler { pool, order: (0..pool.len()).collect(), pos: pool.len(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, k: usize) -> Vec<TokenSeq> {
        let k = k.min(self.pool.len());
        if self.pos + k > self.order.len() {
            self.reshuffle();
        }
        let batch = self.order[self.pos..self.pos + k].iter().map(|&i| self.pool[i].clone()).collect();
        self.pos += k;
        batch
    }
}

fn check_inputs(
    params: &ModelParams,
    frozen: &ModelParams,
    forget: &[TokenSeq],
    retain_pool: &[TokenSeq],
    thresholds: &ForgettingThresholds,
    cfg: &UnlearnConfig,
) -> Result<()> {
    cfg.validate()?;
    thresholds.validate()?;
    if !params.same_shape(frozen) {
        return Err(Error::invalid("frozen model and trainable model have different configurations"));
    }
    if forget.is_empty() {
        return Err(Error::invalid("forget batch is empty"));
    }
    if cfg.uses_retain() && retain_pool.is_empty() {
        return Err(Error::invalid("retain pool is empty but the method needs retain data"));
    }
    if thresholds.n != cfg.el_order {
        return Err(Error::invalid(format!(
            "thresholds were computed with EL_{} but the run uses EL_{}",
            thresholds.n, cfg.el_order
        )));
    }
    Ok(())
}

/// Unlearns one forget batch starting from `params`, with `frozen` as the
/// reference model for the retain loss.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_batch(
    params: ModelParams,
    frozen: &ModelParams,
    forget: &[TokenSeq],
    retain_pool: &[TokenSeq],
    heldout: &[TokenSeq],
    thresholds: &ForgettingThresholds,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    let mut opt = OptimizerState::for_params(&params, AdamConfig { lr: cfg.lr, ..Default::default() });
    run(params, frozen, forget, retain_pool, heldout, thresholds, cfg, &mut opt)
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut params: ModelParams,
    frozen: &ModelParams,
    forget: &[TokenSeq],
    retain_pool: &[TokenSeq],
    heldout: &[TokenSeq],
    thresholds: &ForgettingThresholds,
    cfg: &UnlearnConfig,
    opt: &mut OptimizerState,
) -> Result<(ModelParams, UnlearnTrace)> {
    check_inputs(&params, frozen, forget, retain_pool, thresholds, cfg)?;
    let n = cfg.el_order;
    let mut records = vec![evaluate_epoch(&params, 0, None, forget, heldout, n)?];
    let done = |r: &EpochRecord| stop_predicate_on(r, thresholds, cfg.stop_mode, cfg.stop_metrics);

    let mut sampler = RetainSampler::new(retain_pool, cfg.seed);
    let mut stop_reason = StopReason::EpochCap;
    if done(&records[0]) {
        stop_reason = StopReason::ThresholdsMet;
    } else {
        'epochs: for epoch in 1..=cfg.max_epochs {
            if cfg.uses_retain() {
                sampler.reshuffle();
            }
            let mut last = None;
            let epoch_start = params.clone();
            for chunk in forget.chunks(cfg.forget_batch_size) {
                let retain = if cfg.uses_retain() { sampler.next_batch(cfg.retain_sample_size) } else { Vec::new() };
                let mut grads = Grads::zeros(params.len());
                let lb = match pop_grad(&params.engine::<f32>(), frozen, chunk, &retain, cfg.lambda, cfg.method, &mut grads) {
                    Err(Error::Numerical(_)) => {
                        stop_reason = StopReason::NumericalFailure;
                        break 'epochs;
                    }
                    other => other?,
                };
                let before = params.clone();
                let stepped = lb.is_finite() && opt.update(params.as_mut_slice(), &grads.data).is_ok();
                if !stepped || !params.all_finite() {
                    params = before;
                    stop_reason = StopReason::NumericalFailure;
                    break 'epochs;
                }
                last = Some(lb);
            }
            let rec = evaluate_epoch(&params, epoch, last, forget, heldout, n)?;
            // finite but huge weights can still overflow the forward pass
            if !rec.is_finite() {
                params = epoch_start;
                stop_reason = StopReason::NumericalFailure;
                break;
            }
            let met = done(&rec);
            records.push(rec);
            if met {
                stop_reason = StopReason::ThresholdsMet;
                break;
            }
        }
    }

    let trace = UnlearnTrace {
        config: cfg.clone(),
        thresholds: thresholds.clone(),
        forget_ids: forget.iter().map(|s| s.id.clone()).collect(),
        records,
        stop_reason,
    };
    Ok((params, trace))
}

/// Unlearns `batches` one after another on the evolving model. Batch `k`
/// runs with seed `cfg.seed + k`. A numerical failure ends the sequence
/// early; the traces so far are returned.
pub fn sequential_unlearn(
    params: ModelParams,
    batches: &[Vec<TokenSeq>],
    retain_pool: &[TokenSeq],
    heldout: &[TokenSeq],
    thresholds: &ForgettingThresholds,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, Vec<UnlearnTrace>)> {
    cfg.validate()?;
    let original = params.clone();
    let mut params = params;
    let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut opt = OptimizerState::for_params(&params, adam);
    let mut traces = Vec::with_capacity(batches.len());
    for (k, batch) in batches.iter().enumerate() {
        let teacher = match cfg.teacher {
            TeacherPolicy::PerBatch => params.clone(),
            TeacherPolicy::Original => original.clone(),
        };
        if cfg.reset_optimizer {
            opt = OptimizerState::for_params(&params, adam);
        }
        let batch_cfg = UnlearnConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let (next, trace) = run(params, &teacher, batch, retain_pool, heldout, thresholds, &batch_cfg, &mut opt)?;
        params = next;
        let failed = trace.stop_reason == StopReason::NumericalFailure;
        traces.push(trace);
        if failed {
            break;
        }
    }
    Ok((params, traces))
}
