use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InitKind, Layout, ModelConfig};
use super::engine::{Engine, Real};
use super::{argmax, check_context, check_generation, LanguageModel, LogProbs};
use crate::error::{Error, Result};

/// Standard deviation of the initial embeddings and projections.
pub const INIT_STD: f64 = 0.02;

/// All trainable tensors of the model, stored in one flat `f32` buffer laid
/// out by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f32>,
}

/// Gradient accumulator, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<f64>,
}

impl Grads {
    pub fn zeros(len: usize) -> Self {
        Grads { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut data = vec![0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for t in &layout.tensors {
        let dst = &mut data[t.offset..t.offset + t.len()];
        match t.init {
            InitKind::Normal => dst.iter_mut().for_each(|x| *x = normal.sample(&mut rng) as f32),
            InitKind::Ones => dst.fill(1.0),
            InitKind::Zeros => dst.fill(0.0),
        }
    }
    Ok(ModelParams { config: cfg.clone(), layout, data })
}

impl ModelParams {
    pub fn from_raw(config: ModelConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::invalid(format!(
                "parameter buffer has {} values, config needs {}",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(ModelParams { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.tensors.iter().find(|t| t.name == name).map(|t| &self.data[t.offset..t.offset + t.len()])
    }

    pub fn engine<F: Real>(&self) -> Engine<'_, F> {
        Engine::new(&self.config, &self.layout, F::view(&self.data))
    }

    /// Engine over an arbitrary weight vector with this model's shapes.
    pub fn engine_with<F: Real>(&self, weights: Vec<F>) -> Engine<'_, F> {
        Engine::new(&self.config, &self.layout, weights.into())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.config == other.config
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&x| x as f64).collect()
}

impl LanguageModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn next_token_logprobs(&self, tokens: &[u32]) -> Result<LogProbs> {
        check_context(self, tokens)?;
        let trace = self.engine::<f32>().forward(tokens)?;
        Ok(LogProbs::new(self.config.vocab_size, to_f64(&trace.logprobs)))
    }

    fn extend(&self, prefix: &[u32], n_new: usize, choose: &mut dyn FnMut(&[f64]) -> u32) -> Result<Vec<u32>> {
        check_generation(self, prefix, n_new)?;
        let engine = self.engine::<f32>();
        let mut state = engine.start();
        for &t in prefix {
            engine.step(&mut state, t)?;
        }
        let mut out = prefix.to_vec();
        for i in 0..n_new {
            let next = choose(&to_f64(&state.logprobs));
            out.push(next);
            if i + 1 < n_new {
                engine.step(&mut state, next)?;
            }
        }
        Ok(out)
    }

    fn greedy_suffixes(&self, x: &[u32], starts: std::ops::Range<usize>) -> Result<Vec<Vec<u32>>> {
        check_context(self, x)?;
        if starts.start == 0 || starts.end > x.len() + 1 {
            return Err(Error::invalid("greedy suffix starts must lie in 1..=len"));
        }
        let engine = self.engine::<f32>();
        let mut full = engine.start();
        let mut rows = Vec::with_capacity(x.len());
        for &t in x {
            engine.step(&mut full, t)?;
            rows.push(full.logprobs.clone());
        }
        starts
            .map(|t| {
                let n_new = x.len() - t;
                let mut state = full.truncated(t, rows[t - 1].clone());
                let mut out = Vec::with_capacity(n_new);
                for i in 0..n_new {
                    let next = argmax(&to_f64(&state.logprobs));
                    out.push(next);
                    if i + 1 < n_new {
                        engine.step(&mut state, next)?;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

impl<F: Real> LanguageModel for Engine<'_, F> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn next_token_logprobs(&self, tokens: &[u32]) -> Result<LogProbs> {
        let trace = self.forward(tokens)?;
        Ok(LogProbs::new(self.config().vocab_size, trace.logprobs.iter().map(|x| x.as_f64()).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 10).unwrap());
    }

    #[test]
    fn norm_gains_are_one_and_biases_zero() {
        let p = init_params(&ModelConfig::default(), 1).unwrap();
        for t in &p.layout().tensors {
            let vals = p.tensor(&t.name).unwrap();
            if t.name.ends_with("_g") {
                assert!(vals.iter().all(|&v| v == 1.0), "{}", t.name);
            }
            if t.name.ends_with("_b") {
                assert!(vals.iter().all(|&v| v == 0.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn embedding_scale_matches_init_std() {
        let p = init_params(&ModelConfig::default(), 4).unwrap();
        let e = p.tensor("tok_emb").unwrap();
        assert!(e.len() >= 10_000);
        let n = e.len() as f64;
        let mean = e.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = e.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        assert!((sd - INIT_STD).abs() <= 0.2 * INIT_STD, "sd {sd}");
    }

    #[test]
    fn from_raw_checks_length() {
        let cfg = ModelConfig { embed_dim: 8, n_heads: 1, n_layers: 1, vocab_size: 16, context_len: 8, mlp_mult: 2 };
        assert!(ModelParams::from_raw(cfg.clone(), vec![0.0; 3]).is_err());
        let n = Layout::new(&cfg).total;
        assert!(ModelParams::from_raw(cfg, vec![0.0; n]).is_ok());
    }
}
