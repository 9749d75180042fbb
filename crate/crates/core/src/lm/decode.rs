use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_generation, LanguageModel};
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// The nucleus of a probability vector: tokens in descending probability
/// (ties by ascending id), cut at the shortest prefix whose mass reaches
/// `p`, renormalized. Returns `(token, probability)` pairs.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(u32, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("nucleus mass {p} not in (0, 1]")));
    }
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &tok) in order.iter().enumerate() {
        cum += probs[tok as usize];
        if cum >= p {
            cut = i + 1;
            break;
        }
    }
    let kept = &order[..cut];
    let mass: f64 = kept.iter().map(|&t| probs[t as usize]).sum();
    Ok(kept.iter().map(|&t| (t, probs[t as usize] / mass)).collect())
}

fn sample_nucleus(logprobs: &[f64], p: f64, rng: &mut ChaCha8Rng) -> u32 {
    let probs: Vec<f64> = logprobs.iter().map(|&lp| lp.exp()).collect();
    let nuc = nucleus(&probs, p).expect("p validated by caller");
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(tok, q) in &nuc {
        cum += q;
        if u < cum {
            return tok;
        }
    }
    nuc.last().map(|&(t, _)| t).unwrap_or(0)
}

/// Appends `n_new` argmax tokens to `prefix`.
pub fn greedy_decode<M: LanguageModel + ?Sized>(model: &M, prefix: &[u32], n_new: usize) -> Result<Vec<u32>> {
    check_generation(model, prefix, n_new)?;
    model.extend(prefix, n_new, &mut |row| argmax(row))
}

/// Appends `n_new` tokens drawn by nucleus sampling with mass `p`.
pub fn top_p_sample<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &[u32],
    n_new: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("nucleus mass {p} not in (0, 1]")));
    }
    check_generation(model, prefix, n_new)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.extend(prefix, n_new, &mut |row| sample_nucleus(row, p, &mut rng))
}
