use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Engine, Real};
use super::optim::OptimizerState;
use super::params::{Grads, ModelParams};
use super::LogProbs;
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

/// Target weights for one predicted position.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetRow {
    /// `weight` on a single token.
    OneHot { token: u32, weight: f64 },
    /// A full weight vector over the vocabulary (soft labels).
    Dense(Vec<f64>),
}

/// Per-position targets for the `T - 1` predicted positions of a sequence.
/// The loss is `-sum_t <target_t, log p_t>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub rows: Vec<TargetRow>,
}

impl TargetSpec {
    /// True next tokens with weight 1.
    pub fn hard(x: &[u32]) -> Self {
        TargetSpec { rows: x[1..].iter().map(|&token| TargetRow::OneHot { token, weight: 1.0 }).collect() }
    }

    /// The distributions of a teacher's log-probability rows.
    pub fn soft(teacher: &LogProbs) -> Self {
        TargetSpec { rows: teacher.iter_rows().map(|r| TargetRow::Dense(r.iter().map(|lp| lp.exp()).collect())).collect() }
    }

    pub fn zeros(positions: usize) -> Self {
        TargetSpec { rows: vec![TargetRow::OneHot { token: 0, weight: 0.0 }; positions] }
    }

    fn validate(&self, positions: usize, vocab: usize) -> Result<()> {
        if self.rows.len() != positions {
            return Err(Error::invalid(format!("{} target rows for {positions} predicted positions", self.rows.len())));
        }
        for row in &self.rows {
            match row {
                TargetRow::OneHot { token, weight } => {
                    if !weight.is_finite() {
                        return Err(Error::invalid("non-finite target weight"));
                    }
                    if *token as usize >= vocab {
                        return Err(Error::invalid(format!("target token {token} outside vocabulary")));
                    }
                }
                TargetRow::Dense(w) => {
                    if w.len() != vocab {
                        return Err(Error::invalid(format!("dense target has {} entries, vocab is {vocab}", w.len())));
                    }
                    if w.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid("non-finite target weight"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Forward + backward for `-sum_t <target_t, log p_t>`. `scale` times the
/// gradient is added to `grads`; the unscaled loss is returned.
pub fn backward_into<F: Real>(
    engine: &Engine<'_, F>,
    x: &[u32],
    spec: &TargetSpec,
    scale: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let vocab = engine.config().vocab_size;
    if x.len() < 2 {
        return Err(Error::SequenceTooShort { len: x.len(), min: 2 });
    }
    spec.validate(x.len() - 1, vocab)?;
    if !scale.is_finite() {
        return Err(Error::invalid("non-finite loss scale"));
    }
    let trace = engine.forward(x)?;
    let mut dlogits = vec![F::zero(); x.len() * vocab];
    let mut loss = 0.0;
    for (t, row) in spec.rows.iter().enumerate() {
        let lp = &trace.logprobs[t * vocab..(t + 1) * vocab];
        let dl = &mut dlogits[t * vocab..(t + 1) * vocab];
        // d/dlogit_v of -sum_u y_u log p_u = (sum_u y_u) p_v - y_v
        match row {
            TargetRow::OneHot { token, weight } => {
                if *weight == 0.0 {
                    continue;
                }
                loss -= weight * lp[*token as usize].as_f64();
                for (d, &l) in dl.iter_mut().zip(lp) {
                    *d = F::of(scale * weight * l.as_f64().exp());
                }
                dl[*token as usize] -= F::of(scale * weight);
            }
            TargetRow::Dense(y) => {
                let mass: f64 = y.iter().sum();
                for ((d, &l), &yv) in dl.iter_mut().zip(lp).zip(y) {
                    if yv != 0.0 {
                        loss -= yv * l.as_f64();
                    }
                    *d = F::of(scale * (mass * l.as_f64().exp() - yv));
                }
            }
        }
    }
    let g = engine.backward(&trace, &dlogits);
    for (acc, gv) in grads.data.iter_mut().zip(g) {
        *acc += gv.as_f64();
    }
    Ok(loss)
}

/// Loss and exact gradient for one sequence under `spec`, scaled by `scale`.
pub fn backward(params: &ModelParams, x: &[u32], spec: &TargetSpec, scale: f64) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros(params.len());
    let loss = backward_into(&params.engine::<f32>(), x, spec, scale, &mut grads)?;
    Ok((scale * loss, grads))
}

/// Mini-batch NLL minimization. Returns the mean per-sequence training
/// NLL of every epoch (measured before each batch's update).
pub fn pretrain(
    params: &mut ModelParams,
    data: &[TokenSeq],
    epochs: usize,
    batch_size: usize,
    state: &mut OptimizerState,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if epochs > 0 && data.is_empty() {
        return Err(Error::invalid("no pretraining data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Grads::zeros(params.len());
            {
                let engine = params.engine::<f32>();
                for &i in batch {
                    let x = &data[i].tokens;
                    total += backward_into(&engine, x, &TargetSpec::hard(x), scale, &mut grads)?;
                }
            }
            state.update(params.as_mut_slice(), &grads.data)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {mean}")));
        }
        curve.push(mean);
    }
    Ok(curve)
}
