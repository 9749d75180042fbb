//! A small decoder-only causal language model with exact reverse-mode
//! gradients, an adaptive-moment optimizer, and greedy / nucleus decoding.
//!
//! Everything downstream (losses, metrics, unlearning) talks to models
//! through [`LanguageModel`], so hand-built next-token tables
//! ([`TableModel`]) can stand in for the transformer in tests.
//!
//! Prediction convention: for a sequence `x_1..x_T`, row `t` of the
//! log-probability matrix is the next-token distribution after `x_1..x_t`,
//! i.e. the prediction for `x_{t+1}`. The first token is never predicted.

mod checkpoint;
mod config;
mod decode;
mod engine;
mod optim;
mod params;
mod table;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{LayerOffsets, Layout, ModelConfig, TensorInfo};
pub use decode::{argmax, greedy_decode, nucleus, top_p_sample};
pub use engine::{DecodeState, Engine, Real};
pub use optim::{opt_step, AdamConfig, OptimizerState};
pub use params::{init_params, Grads, ModelParams};
pub use table::TableModel;
pub use train::{backward, backward_into, pretrain, TargetRow, TargetSpec};

use crate::error::{Error, Result};

/// Row-major matrix of next-token log-probabilities, one row per context.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    vocab: usize,
    data: Vec<f64>,
}

impl LogProbs {
    pub fn new(vocab: usize, data: Vec<f64>) -> Self {
        assert!(vocab > 0 && data.len() % vocab == 0, "ragged log-probability matrix");
        LogProbs { vocab, data }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.vocab)
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        self.data.truncate(rows * self.vocab);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Anything that yields next-token distributions for a token context.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn context_len(&self) -> usize;

    /// One row per input position: row `t` is `log p(. | tokens[..=t])`.
    fn next_token_logprobs(&self, tokens: &[u32]) -> Result<LogProbs>;

    /// Appends `n_new` tokens, each picked by `choose` from the current
    /// next-token log-distribution.
    fn extend(
        &self,
        prefix: &[u32],
        n_new: usize,
        choose: &mut dyn FnMut(&[f64]) -> u32,
    ) -> Result<Vec<u32>> {
        check_generation(self, prefix, n_new)?;
        let mut out = prefix.to_vec();
        for _ in 0..n_new {
            let lp = self.next_token_logprobs(&out)?;
            let next = choose(lp.row(lp.rows() - 1));
            out.push(next);
        }
        Ok(out)
    }

    /// For every `t` in `starts`, the greedy continuation of `x[..t]` of
    /// length `x.len() - t` (generated tokens only).
    fn greedy_suffixes(&self, x: &[u32], starts: std::ops::Range<usize>) -> Result<Vec<Vec<u32>>> {
        starts
            .map(|t| {
                let full = self.extend(&x[..t], x.len() - t, &mut |row| argmax(row))?;
                Ok(full[t..].to_vec())
            })
            .collect()
    }
}

/// Validates a context: non-empty, within the context window, ids in range.
pub(crate) fn check_context<M: LanguageModel + ?Sized>(model: &M, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    if tokens.len() > model.context_len() {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: model.context_len() });
    }
    let v = model.vocab_size();
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of size {v}")));
    }
    Ok(())
}

pub(crate) fn check_generation<M: LanguageModel + ?Sized>(model: &M, prefix: &[u32], n_new: usize) -> Result<()> {
    check_context(model, prefix)?;
    if prefix.len() + n_new > model.context_len() {
        return Err(Error::SequenceTooLong { len: prefix.len() + n_new, max: model.context_len() });
    }
    Ok(())
}

/// The `(T-1) x V` matrix whose row `t` predicts `x_{t+1}`.
pub fn forward_logprobs<M: LanguageModel + ?Sized>(model: &M, x: &[u32]) -> Result<LogProbs> {
    if x.len() < 2 {
        return Err(Error::SequenceTooShort { len: x.len(), min: 2 });
    }
    let mut lp = model.next_token_logprobs(x)?;
    lp.truncate_rows(x.len() - 1);
    Ok(lp)
}

/// `sum_t log p(x_{t+1} | x_{<=t})`.
pub fn seq_logprob<M: LanguageModel + ?Sized>(model: &M, x: &[u32]) -> Result<f64> {
    let lp = forward_logprobs(model, x)?;
    Ok(lp.iter_rows().zip(&x[1..]).map(|(row, &next)| row[next as usize]).sum())
}
