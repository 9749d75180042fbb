use std::collections::HashMap;

use super::{check_context, LanguageModel, LogProbs};
use crate::error::{Error, Result};

/// A next-token lookup table: the distribution after a context is that of
/// the longest stored context suffix, falling back to a default.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: usize,
    context_len: usize,
    default: Vec<f64>,
    entries: HashMap<Vec<u32>, Vec<f64>>,
    longest_key: usize,
}

impl TableModel {
    /// Uniform by default.
    pub fn new(vocab: usize, context_len: usize) -> Self {
        TableModel {
            vocab,
            context_len,
            default: vec![1.0 / vocab as f64; vocab],
            entries: HashMap::new(),
            longest_key: 0,
        }
    }

    fn check(&self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.vocab {
            return Err(Error::invalid(format!("distribution has {} entries, vocab is {}", probs.len(), self.vocab)));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("not a probability vector"));
        }
        Ok(())
    }

    pub fn with_default(mut self, probs: Vec<f64>) -> Result<Self> {
        self.check(&probs)?;
        self.default = probs;
        Ok(self)
    }

    pub fn with_entry(mut self, context: &[u32], probs: Vec<f64>) -> Result<Self> {
        self.check(&probs)?;
        self.longest_key = self.longest_key.max(context.len());
        self.entries.insert(context.to_vec(), probs);
        Ok(self)
    }

    /// Deterministically continues each sequence: after any prefix of
    /// `seq`, the next token of `seq` gets probability 1. Later sequences
    /// override earlier ones on shared contexts.
    pub fn memorizing(vocab: usize, context_len: usize, seqs: &[&[u32]]) -> Result<Self> {
        let mut m = TableModel::new(vocab, context_len);
        for s in seqs {
            for t in 1..s.len() {
                let mut probs = vec![0.0; vocab];
                probs[s[t] as usize] = 1.0;
                m = m.with_entry(&s[..t], probs)?;
            }
        }
        Ok(m)
    }

    pub fn lookup(&self, context: &[u32]) -> &[f64] {
        let max = self.longest_key.min(context.len());
        for k in (1..=max).rev() {
            if let Some(p) = self.entries.get(&context[context.len() - k..]) {
                return p;
            }
        }
        &self.default
    }
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn next_token_logprobs(&self, tokens: &[u32]) -> Result<LogProbs> {
        check_context(self, tokens)?;
        let mut data = Vec::with_capacity(tokens.len() * self.vocab);
        for t in 1..=tokens.len() {
            data.extend(self.lookup(&tokens[..t]).iter().map(|p| p.ln()));
        }
        Ok(LogProbs::new(self.vocab, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_suffix_wins() {
        let m = TableModel::new(3, 8)
            .with_entry(&[1], vec![1.0, 0.0, 0.0])
            .unwrap()
            .with_entry(&[2, 1], vec![0.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(m.lookup(&[0, 1]), &[1.0, 0.0, 0.0]);
        assert_eq!(m.lookup(&[2, 1]), &[0.0, 1.0, 0.0]);
        assert_eq!(m.lookup(&[2]), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(TableModel::new(2, 4).with_default(vec![0.5, 0.6]).is_err());
        assert!(TableModel::new(2, 4).with_entry(&[0], vec![1.0]).is_err());
    }
}
