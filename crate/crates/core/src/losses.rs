//! Unlearning objectives.
//!
//! Per-sequence quantities sum over predicted positions; batch quantities
//! average over sequences.
//!
//! * `asc`: mean sequence log-probability of the forget batch. Minimizing
//!   it pushes the target sequences' likelihood down.
//! * `ret` (hard): mean of `log p_frozen(x) - log p(x)` over retain data; the
//!   frozen term is a constant for optimization.
//! * `ret` (soft): mean over retain data of the summed per-position
//!   `KL(p_frozen || p)`. Its gradient equals that of the cross-entropy to
//!   the frozen distribution (the two differ by the constant teacher
//!   entropy), but KL is zero exactly when the two models agree.
//! * `total = asc + lambda * ret`. A zero-weighted retain term is not
//!   evaluated and reported as 0, which makes `Pop` with `lambda = 0`
//!   identical to `Ul`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::lm::{
    backward_into, forward_logprobs, seq_logprob, Engine, Grads, LanguageModel, ModelParams, Real, TargetSpec,
};

/// Which objective drives unlearning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Gradient ascent alone.
    Ul,
    /// Gradient ascent plus the hard-label retain loss.
    PopFlat,
    /// Gradient ascent plus the soft-label (frozen distribution) retain loss.
    Pop,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ul => "ul",
            Method::PopFlat => "pop_flat",
            Method::Pop => "pop",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ul" => Ok(Method::Ul),
            "pop_flat" | "popflat" => Ok(Method::PopFlat),
            "pop" => Ok(Method::Pop),
            other => Err(Error::invalid(format!("unknown method {other:?} (expected ul, pop_flat or pop)"))),
        }
    }
}

impl Method {
    fn uses_retain(self, lambda: f64) -> bool {
        self != Method::Ul && lambda != 0.0
    }

    /// The retain weight actually applied: UL ignores `lambda`.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        if self == Method::Ul {
            0.0
        } else {
            lambda
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub asc: f64,
    pub ret: f64,
    pub total: f64,
    /// Effective retain weight; always 0 for UL.
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(asc: f64, ret: f64, lambda: f64) -> Self {
        LossBreakdown { asc, ret, total: asc + lambda * ret, lambda }
    }

    pub fn is_finite(&self) -> bool {
        self.asc.is_finite() && self.ret.is_finite() && self.total.is_finite()
    }
}

fn non_empty(batch: &[TokenSeq], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid(format!("{what} batch is empty")));
    }
    Ok(())
}

fn check_pair<S, T>(student: &S, teacher: &T) -> Result<()>
where
    S: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    if student.vocab_size() != teacher.vocab_size() || student.context_len() != teacher.context_len() {
        return Err(Error::invalid("frozen model and trainable model have different configurations"));
    }
    Ok(())
}

fn mean_over<F>(batch: &[TokenSeq], f: F) -> Result<f64>
where
    F: Fn(&TokenSeq) -> Result<f64>,
{
    let mut sum = 0.0;
    for x in batch {
        sum += f(x)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Mean negative log-likelihood per sequence.
pub fn nll_loss<M: LanguageModel + ?Sized>(model: &M, batch: &[TokenSeq]) -> Result<f64> {
    non_empty(batch, "nll")?;
    mean_over(batch, |x| Ok(-seq_logprob(model, &x.tokens)?))
}

/// Mean sequence log-probability of the forget batch (always <= 0).
pub fn asc_loss<M: LanguageModel + ?Sized>(model: &M, forget: &[TokenSeq]) -> Result<f64> {
    non_empty(forget, "forget")?;
    mean_over(forget, |x| seq_logprob(model, &x.tokens))
}

pub fn ret_loss_hard<S, T>(model: &S, frozen: &T, retain: &[TokenSeq]) -> Result<f64>
where
    S: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    check_pair(model, frozen)?;
    non_empty(retain, "retain")?;
    mean_over(retain, |x| Ok(seq_logprob(frozen, &x.tokens)? - seq_logprob(model, &x.tokens)?))
}

/// Summed per-position `KL(frozen || model)` for one sequence.
fn seq_kl<S, T>(model: &S, frozen: &T, x: &[u32]) -> Result<f64>
where
    S: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    let lp_t = forward_logprobs(frozen, x)?;
    let lp_s = forward_logprobs(model, x)?;
    let mut kl = 0.0;
    for (rt, rs) in lp_t.iter_rows().zip(lp_s.iter_rows()) {
        for (&a, &b) in rt.iter().zip(rs) {
            let p = a.exp();
            if p > 0.0 {
                kl += p * (a - b);
            }
        }
    }
    Ok(kl)
}

pub fn ret_loss_soft<S, T>(model: &S, frozen: &T, retain: &[TokenSeq]) -> Result<f64>
where
    S: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    check_pair(model, frozen)?;
    non_empty(retain, "retain")?;
    mean_over(retain, |x| seq_kl(model, frozen, &x.tokens))
}

pub fn pop_loss<S, T>(
    model: &S,
    frozen: &T,
    forget: &[TokenSeq],
    retain: &[TokenSeq],
    lambda: f64,
    method: Method,
) -> Result<LossBreakdown>
where
    S: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    let asc = asc_loss(model, forget)?;
    let ret = if method.uses_retain(lambda) {
        match method {
            Method::PopFlat => ret_loss_hard(model, frozen, retain)?,
            _ => ret_loss_soft(model, frozen, retain)?,
        }
    } else {
        0.0
    };
    Ok(LossBreakdown::new(asc, ret, method.effective_lambda(lambda)))
}

// Gradient versions. Each adds `weight * d(loss)/d(theta)` into `grads` and
// returns the unweighted loss value.

pub fn nll_grad<F: Real>(student: &Engine<'_, F>, batch: &[TokenSeq], weight: f64, grads: &mut Grads) -> Result<f64> {
    non_empty(batch, "nll")?;
    let scale = weight / batch.len() as f64;
    let mut sum = 0.0;
    for x in batch {
        sum += backward_into(student, &x.tokens, &TargetSpec::hard(&x.tokens), scale, grads)?;
    }
    Ok(sum / batch.len() as f64)
}

pub fn asc_grad<F: Real>(student: &Engine<'_, F>, forget: &[TokenSeq], weight: f64, grads: &mut Grads) -> Result<f64> {
    // asc = -nll, so its gradient is the NLL gradient with the sign flipped.
    Ok(-nll_grad(student, forget, -weight, grads)?)
}

pub fn ret_hard_grad<F, T>(
    student: &Engine<'_, F>,
    frozen: &T,
    retain: &[TokenSeq],
    weight: f64,
    grads: &mut Grads,
) -> Result<f64>
where
    F: Real,
    T: LanguageModel + ?Sized,
{
    check_pair(student, frozen)?;
    non_empty(retain, "retain")?;
    let scale = weight / retain.len() as f64;
    let mut sum = 0.0;
    for x in retain {
        let nll = backward_into(student, &x.tokens, &TargetSpec::hard(&x.tokens), scale, grads)?;
        sum += seq_logprob(frozen, &x.tokens)? + nll;
    }
    Ok(sum / retain.len() as f64)
}

pub fn ret_soft_grad<F, T>(
    student: &Engine<'_, F>,
    frozen: &T,
    retain: &[TokenSeq],
    weight: f64,
    grads: &mut Grads,
) -> Result<f64>
where
    F: Real,
    T: LanguageModel + ?Sized,
{
    check_pair(student, frozen)?;
    non_empty(retain, "retain")?;
    let scale = weight / retain.len() as f64;
    let mut sum = 0.0;
    for x in retain {
        let lp_t = forward_logprobs(frozen, &x.tokens)?;
        let ce = backward_into(student, &x.tokens, &TargetSpec::soft(&lp_t), scale, grads)?;
        sum += ce - teacher_entropy(&lp_t);
    }
    Ok(sum / retain.len() as f64)
}

/// Accumulated in the same order as the cross-entropy in `backward_into`,
/// so the difference is exactly zero when student and teacher agree.
fn teacher_entropy(teacher: &crate::lm::LogProbs) -> f64 {
    let mut h = 0.0;
    for row in teacher.iter_rows() {
        for &a in row {
            let p = a.exp();
            if p != 0.0 {
                h -= p * a;
            }
        }
    }
    h
}

/// Loss breakdown and gradient of `asc + lambda * ret` for `method`.
pub fn pop_grad<F, T>(
    student: &Engine<'_, F>,
    frozen: &T,
    forget: &[TokenSeq],
    retain: &[TokenSeq],
    lambda: f64,
    method: Method,
    grads: &mut Grads,
) -> Result<LossBreakdown>
where
    F: Real,
    T: LanguageModel + ?Sized,
{
    let asc = asc_grad(student, forget, 1.0, grads)?;
    let ret = if method.uses_retain(lambda) {
        match method {
            Method::PopFlat => ret_hard_grad(student, frozen, retain, lambda, grads)?,
            _ => ret_soft_grad(student, frozen, retain, lambda, grads)?,
        }
    } else {
        0.0
    };
    Ok(LossBreakdown::new(asc, ret, method.effective_lambda(lambda)))
}

/// [`pop_grad`] on `f32` parameters with a frozen copy of the same shape.
pub fn pop_loss_grad(
    params: &ModelParams,
    frozen: &ModelParams,
    forget: &[TokenSeq],
    retain: &[TokenSeq],
    lambda: f64,
    method: Method,
) -> Result<(LossBreakdown, Grads)> {
    if !params.same_shape(frozen) {
        return Err(Error::invalid("frozen model and trainable model have different configurations"));
    }
    let mut grads = Grads::zeros(params.len());
    let lb = pop_grad(&params.engine::<f32>(), frozen, forget, retain, lambda, method, &mut grads)?;
    Ok((lb, grads))
}
