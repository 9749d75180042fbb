//! Helpers shared by the integration tests: small random models, finite
//! difference gradient checks, and brute-force metric oracles written
//! independently of the library code.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqforget::lm::{init_params, Grads, LanguageModel, ModelConfig, ModelParams};
use seqforget::losses::{self, Method};
use seqforget::TokenSeq;

pub fn tiny_config() -> ModelConfig {
    ModelConfig { vocab_size: 32, embed_dim: 8, n_layers: 1, n_heads: 2, context_len: 16, mlp_mult: 4 }
}

/// A model far from initialization so every nonlinearity is exercised:
/// weights ~ N(0, 0.3), gains ~ 1 + N(0, 0.1), biases ~ N(0, 0.1).
pub fn random_model(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let tensors = p.layout().tensors.clone();
    let data = p.as_mut_slice();
    for t in &tensors {
        for v in &mut data[t.offset..t.offset + t.len()] {
            let z: f32 = rng.sample(rand_distr::StandardNormal);
            *v = if t.name.ends_with("_g") {
                1.0 + 0.1 * z
            } else if t.name.ends_with("_b") {
                0.1 * z
            } else {
                0.3 * z
            };
        }
    }
    p
}

pub fn random_seqs(rng: &mut ChaCha8Rng, n: usize, len: (usize, usize), vocab: u32, tag: &str) -> Vec<TokenSeq> {
    (0..n)
        .map(|i| {
            let l = rng.gen_range(len.0..=len.1);
            TokenSeq::new(format!("{tag}{i}"), (0..l).map(|_| rng.gen_range(0..vocab)).collect()).unwrap()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradLoss {
    Nll,
    Asc,
    RetHard,
    RetSoft,
    Pop(Method, f64),
}

pub struct GradProblem {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub forget: Vec<TokenSeq>,
    pub retain: Vec<TokenSeq>,
}

impl GradProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = cfg.vocab_size as u32;
        GradProblem {
            student: random_model(&cfg, seed),
            teacher: random_model(&cfg, seed + 1000),
            forget: random_seqs(&mut rng, 2, (5, 9), v, "f"),
            retain: random_seqs(&mut rng, 2, (5, 9), v, "r"),
        }
    }

    /// Loss value for any model, through the value-only functions.
    pub fn value<M: LanguageModel + ?Sized>(&self, model: &M, loss: GradLoss) -> f64 {
        match loss {
            GradLoss::Nll => losses::nll_loss(model, &self.forget).unwrap(),
            GradLoss::Asc => losses::asc_loss(model, &self.forget).unwrap(),
            GradLoss::RetHard => losses::ret_loss_hard(model, &self.teacher, &self.retain).unwrap(),
            GradLoss::RetSoft => losses::ret_loss_soft(model, &self.teacher, &self.retain).unwrap(),
            GradLoss::Pop(m, lambda) => {
                losses::pop_loss(model, &self.teacher, &self.forget, &self.retain, lambda, m).unwrap().total
            }
        }
    }

    /// Analytic gradient with the student evaluated in `f32`.
    pub fn analytic(&self, loss: GradLoss) -> Grads {
        self.analytic_with::<f32>(loss, self.student.engine::<f32>())
    }

    /// Analytic gradient with the student evaluated in `f64`.
    pub fn analytic_f64(&self, loss: GradLoss) -> Grads {
        self.analytic_with::<f64>(loss, self.student.engine::<f64>())
    }

    fn analytic_with<F: seqforget::lm::Real>(&self, loss: GradLoss, e: seqforget::lm::Engine<'_, F>) -> Grads {
        let mut g = Grads::zeros(self.student.len());
        match loss {
            GradLoss::Nll => {
                losses::nll_grad(&e, &self.forget, 1.0, &mut g).unwrap();
            }
            GradLoss::Asc => {
                losses::asc_grad(&e, &self.forget, 1.0, &mut g).unwrap();
            }
            GradLoss::RetHard => {
                losses::ret_hard_grad(&e, &self.teacher, &self.retain, 1.0, &mut g).unwrap();
            }
            GradLoss::RetSoft => {
                losses::ret_soft_grad(&e, &self.teacher, &self.retain, 1.0, &mut g).unwrap();
            }
            GradLoss::Pop(m, lambda) => {
                losses::pop_grad(&e, &self.teacher, &self.forget, &self.retain, lambda, m, &mut g).unwrap();
            }
        }
        g
    }

    /// Central difference at coordinate `i` with step `h`, evaluated in f64.
    pub fn central_difference(&self, loss: GradLoss, i: usize, h: f64) -> f64 {
        let base: Vec<f64> = self.student.as_slice().iter().map(|&x| x as f64).collect();
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base;
        minus[i] -= h;
        let fp = self.value(&self.student.engine_with::<f64>(plus), loss);
        let fm = self.value(&self.student.engine_with::<f64>(minus), loss);
        (fp - fm) / (2.0 * h)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// `count` distinct coordinates, at least one from every tensor.
pub fn sample_coords(params: &ModelParams, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> =
        params.layout().tensors.iter().map(|t| t.offset + rng.gen_range(0..t.len())).collect();
    while out.len() < count {
        let i = rng.gen_range(0..params.len());
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

// ---------- brute-force metric oracles ----------

fn ngram_list(xs: &[u32], n: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= xs.len() {
        out.push(xs[i..i + n].to_vec());
        i += 1;
    }
    out
}

pub fn oracle_overlap(a: &[u32], b: &[u32], n: usize) -> f64 {
    let ga = ngram_list(a, n);
    if ga.is_empty() {
        return 0.0;
    }
    let gb = ngram_list(b, n);
    let mut hits = 0;
    for g in &ga {
        let mut found = false;
        for h in &gb {
            if g == h {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / ga.len() as f64
}

fn count_in<T: PartialEq>(list: &[Vec<T>], g: &[T]) -> usize {
    list.iter().filter(|h| h.as_slice() == g).count()
}

pub fn oracle_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    let mut logs = Vec::new();
    for n in 1..=4 {
        let hg = ngram_list(hyp, n);
        if hg.is_empty() {
            continue;
        }
        let rg = ngram_list(reference, n);
        // clipped count: each distinct hypothesis n-gram counts at most as
        // often as it appears in the reference
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let mut matched = 0;
        for g in &hg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            matched += count_in(&hg, g).min(count_in(&rg, g));
        }
        let p = if matched == 0 { 1e-9 } else { matched as f64 / hg.len() as f64 };
        logs.push(p.ln());
    }
    let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
    bp * geo
}

fn char_ngrams(s: &[char], n: usize) -> Vec<Vec<char>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

pub fn oracle_chrf(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if r.is_empty() {
        return if h.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    for n in 1..=6 {
        let rg = char_ngrams(&r, n);
        if rg.is_empty() {
            continue;
        }
        let hg = char_ngrams(&h, n);
        let mut tally: HashMap<Vec<char>, (usize, usize)> = HashMap::new();
        for g in &hg {
            tally.entry(g.clone()).or_default().0 += 1;
        }
        for g in &rg {
            tally.entry(g.clone()).or_default().1 += 1;
        }
        let matched: usize = tally.values().map(|&(a, b)| a.min(b)).sum();
        ps.push(if hg.is_empty() { 0.0 } else { matched as f64 / hg.len() as f64 });
        rs.push(matched as f64 / rg.len() as f64);
    }
    let p = ps.iter().sum::<f64>() / ps.len() as f64;
    let rc = rs.iter().sum::<f64>() / rs.len() as f64;
    if p == 0.0 && rc == 0.0 {
        return 0.0;
    }
    5.0 * p * rc / (4.0 * p + rc)
}

/// Greedy next token of a lookup table by direct scan: longest stored
/// suffix of the context, first maximal probability.
fn table_walk_next(table: &[(Vec<u32>, Vec<f64>)], default: &[f64], ctx: &[u32]) -> u32 {
    let mut best: Option<&Vec<f64>> = None;
    let mut best_len = 0;
    for (k, probs) in table {
        if k.len() <= ctx.len() && k.len() > best_len && ctx[ctx.len() - k.len()..] == k[..] {
            best = Some(probs);
            best_len = k.len();
        }
    }
    let probs = best.map(|v| v.as_slice()).unwrap_or(default);
    let mut arg = 0;
    for i in 0..probs.len() {
        if probs[i] > probs[arg] {
            arg = i;
        }
    }
    arg as u32
}

/// EL_n by enumerating every prefix and replaying greedy decoding.
pub fn oracle_el(table: &[(Vec<u32>, Vec<f64>)], default: &[f64], x: &[u32], n: usize) -> f64 {
    let t_max = x.len() - n;
    let mut sum = 0.0;
    for t in 1..=t_max {
        let mut ctx = x[..t].to_vec();
        let mut gen = Vec::new();
        for _ in 0..x.len() - t {
            let next = table_walk_next(table, default, &ctx);
            gen.push(next);
            ctx.push(next);
        }
        sum += oracle_overlap(&gen, &x[t..], n);
    }
    sum / t_max as f64
}
