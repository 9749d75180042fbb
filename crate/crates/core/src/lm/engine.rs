//! Forward pass, reverse-mode gradients and incremental decoding, generic
//! over the arithmetic precision.
//!
//! Parameters are stored as `f32`; the engine runs in `f32` for training and
//! evaluation and in `f64` where gradient checks need headroom.

use std::borrow::Cow;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::config::{Layout, ModelConfig};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub trait Real: Float + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn view(w: &[f32]) -> Cow<'_, [Self]>;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn view(w: &[f32]) -> Cow<'_, [Self]> {
        Cow::Borrowed(w)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn view(w: &[f32]) -> Cow<'_, [Self]> {
        Cow::Owned(w.iter().map(|&x| x as f64).collect())
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // Eight independent partial sums so the reduction vectorizes; the order
    // is fixed, so results stay bit-reproducible.
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for j in chunks * 8..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy<F: Real>(y: &mut [F], alpha: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t, :] = sum_i a[t, i] * w[i, :]` with `w` stored `[n_in x n_out]`.
fn matmul<F: Real>(a: &[F], w: &[F], n_in: usize, n_out: usize) -> Vec<F> {
    let rows = a.len() / n_in;
    let mut out = vec![F::zero(); rows * n_out];
    for (o_row, a_row) in out.chunks_exact_mut(n_out).zip(a.chunks_exact(n_in)) {
        for (&ai, w_row) in a_row.iter().zip(w.chunks_exact(n_out)) {
            axpy(o_row, ai, w_row);
        }
    }
    out
}

/// Accumulates `da += dout * w^T` and `dw += a^T * dout`.
fn matmul_backward<F: Real>(
    da: &mut [F],
    dw: &mut [F],
    dout: &[F],
    a: &[F],
    w: &[F],
    n_in: usize,
    n_out: usize,
) {
    for ((da_row, a_row), d_row) in da.chunks_exact_mut(n_in).zip(a.chunks_exact(n_in)).zip(dout.chunks_exact(n_out)) {
        for (i, (w_row, dw_row)) in w.chunks_exact(n_out).zip(dw.chunks_exact_mut(n_out)).enumerate() {
            da_row[i] += dot(d_row, w_row);
            axpy(dw_row, a_row[i], d_row);
        }
    }
}

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_K) * x * x);
    F::of(0.5) * (F::one() + th) + F::of(0.5) * x * (F::one() - th * th) * du
}

fn log_softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for z in row.iter_mut() {
        *z -= lse;
    }
}

struct LnCache<F> {
    out: Vec<F>,
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layernorm<F: Real>(x: &[F], g: &[F], b: &[F]) -> LnCache<F> {
    let d = g.len();
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
    LnCache { out, xhat, rstd }
}

/// Accumulates into `dx`, `dg`, `db`.
fn layernorm_backward<F: Real>(dout: &[F], cache: &LnCache<F>, g: &[F], dg: &mut [F], db: &mut [F], dx: &mut [F]) {
    let d = g.len();
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, ((drow, xrow), dxrow)) in
        dout.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate()
    {
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            dxhat[j] = drow[j] * g[j];
            dg[j] += drow[j] * xrow[j];
            db[j] += drow[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xrow[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dxrow[j] += rs * (dxhat[j] - m1 - xrow[j] * m2);
        }
    }
}

struct LayerTrace<F> {
    ln1: LnCache<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[heads x T x T]`, zero above the diagonal.
    att: Vec<F>,
    y: Vec<F>,
    ln2: LnCache<F>,
    fc: Vec<F>,
    act: Vec<F>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardTrace<F> {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace<F>>,
    lnf: LnCache<F>,
    /// `[T x V]` log-probabilities; row `t` predicts token `t + 1`.
    pub logprobs: Vec<F>,
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    len: usize,
    /// Next-token log-distribution after the tokens fed so far.
    pub logprobs: Vec<F>,
}

impl<F: Real> DecodeState<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The state after only the first `n` fed tokens; `logprobs` must be the
    /// distribution that was current at that point.
    pub fn truncated(&self, n: usize, logprobs: Vec<F>) -> Self {
        assert!(n <= self.len);
        let d = if self.len == 0 { 0 } else { self.k[0].len() / self.len };
        DecodeState {
            k: self.k.iter().map(|k| k[..n * d].to_vec()).collect(),
            v: self.v.iter().map(|v| v[..n * d].to_vec()).collect(),
            len: n,
            logprobs,
        }
    }
}

/// A read-only view of model weights in precision `F`.
pub struct Engine<'a, F: Real> {
    cfg: &'a ModelConfig,
    layout: &'a Layout,
    w: Cow<'a, [F]>,
}

impl<'a, F: Real> Engine<'a, F> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout, w: Cow<'a, [F]>) -> Self {
        assert_eq!(w.len(), layout.total, "weight buffer does not match layout");
        Engine { cfg, layout, w }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn t(&self, off: usize, len: usize) -> &[F] {
        &self.w[off..off + len]
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        if tokens.len() > self.cfg.context_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.cfg.context_len });
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace<F>> {
        self.check(tokens)?;
        let cfg = self.cfg;
        let (n, d, h, vsz) = (tokens.len(), cfg.embed_dim, cfg.hidden_dim(), cfg.vocab_size);
        let lo = self.layout;
        let emb = self.t(lo.tok_emb, vsz * d);
        let pos = self.t(lo.pos_emb, cfg.context_len * d);

        let mut x = vec![F::zero(); n * d];
        for (t, (row, &tok)) in x.chunks_exact_mut(d).zip(tokens).enumerate() {
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            let p = &pos[t * d..(t + 1) * d];
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for off in &lo.layers {
            let ln1 = layernorm(&x, self.t(off.ln1_g, d), self.t(off.ln1_b, d));
            let q = matmul(&ln1.out, self.t(off.wq, d * d), d, d);
            let k = matmul(&ln1.out, self.t(off.wk, d * d), d, d);
            let v = matmul(&ln1.out, self.t(off.wv, d * d), d, d);
            let (att, y) = self.attention(&q, &k, &v, n);
            let proj = matmul(&y, self.t(off.wo, d * d), d, d);
            axpy(&mut x, F::one(), &proj);

            let ln2 = layernorm(&x, self.t(off.ln2_g, d), self.t(off.ln2_b, d));
            let fc = matmul(&ln2.out, self.t(off.w_fc, d * h), d, h);
            let act: Vec<F> = fc.iter().map(|&z| gelu(z)).collect();
            let mlp = matmul(&act, self.t(off.w_proj, h * d), h, d);
            axpy(&mut x, F::one(), &mlp);
            layers.push(LayerTrace { ln1, q, k, v, att, y, ln2, fc, act });
        }

        let lnf = layernorm(&x, self.t(lo.lnf_g, d), self.t(lo.lnf_b, d));
        let mut logprobs = vec![F::zero(); n * vsz];
        for (lrow, z) in logprobs.chunks_exact_mut(vsz).zip(lnf.out.chunks_exact(d)) {
            for (l, e) in lrow.iter_mut().zip(emb.chunks_exact(d)) {
                *l = dot(z, e);
            }
            log_softmax_in_place(lrow);
        }
        Ok(ForwardTrace { tokens: tokens.to_vec(), layers, lnf, logprobs })
    }

    fn attention(&self, q: &[F], k: &[F], v: &[F], n: usize) -> (Vec<F>, Vec<F>) {
        let (d, heads, hd) = (self.cfg.embed_dim, self.cfg.n_heads, self.cfg.head_dim());
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut att = vec![F::zero(); heads * n * n];
        let mut y = vec![F::zero(); n * d];
        for hh in 0..heads {
            let c = hh * hd..(hh + 1) * hd;
            for t in 0..n {
                let a = &mut att[(hh * n + t) * n..(hh * n + t) * n + t + 1];
                let qt = &q[t * d..][c.clone()];
                let mut max = F::neg_infinity();
                for (u, s) in a.iter_mut().enumerate() {
                    *s = dot(qt, &k[u * d..][c.clone()]) * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in a.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = F::one() / sum;
                let yt = &mut y[t * d..][c.clone()];
                for (u, s) in a.iter_mut().enumerate() {
                    *s *= inv;
                    axpy(yt, *s, &v[u * d..][c.clone()]);
                }
            }
        }
        (att, y)
    }

    /// Exact gradient of `sum_{t,v} dlogits[t, v] * logits[t, v]` with
    /// respect to every parameter; `dlogits` is `[T x V]`.
    pub fn backward(&self, trace: &ForwardTrace<F>, dlogits: &[F]) -> Vec<F> {
        let cfg = self.cfg;
        let lo = self.layout;
        let (n, d, h, vsz) = (trace.tokens.len(), cfg.embed_dim, cfg.hidden_dim(), cfg.vocab_size);
        assert_eq!(dlogits.len(), n * vsz);
        let mut g = vec![F::zero(); lo.total];
        let emb = self.t(lo.tok_emb, vsz * d);

        // Tied output projection.
        let mut dz = vec![F::zero(); n * d];
        {
            let demb = &mut g[lo.tok_emb..lo.tok_emb + vsz * d];
            for ((dl_row, z), dz_row) in
                dlogits.chunks_exact(vsz).zip(trace.lnf.out.chunks_exact(d)).zip(dz.chunks_exact_mut(d))
            {
                for (vi, &dl) in dl_row.iter().enumerate() {
                    if dl != F::zero() {
                        axpy(dz_row, dl, &emb[vi * d..(vi + 1) * d]);
                        axpy(&mut demb[vi * d..(vi + 1) * d], dl, z);
                    }
                }
            }
        }

        let mut dx = vec![F::zero(); n * d];
        {
            let (dgf, dbf) = g[lo.lnf_g..lo.lnf_g + 2 * d].split_at_mut(d);
            layernorm_backward(&dz, &trace.lnf, self.t(lo.lnf_g, d), dgf, dbf, &mut dx);
        }

        for (off, lt) in lo.layers.iter().zip(&trace.layers).rev() {
            // MLP block: x += gelu(ln2(x) Wfc) Wproj
            let mut dact = vec![F::zero(); n * h];
            matmul_backward(&mut dact, &mut g[off.w_proj..off.w_proj + h * d], &dx, &lt.act, self.t(off.w_proj, h * d), h, d);
            let dfc: Vec<F> = dact.iter().zip(&lt.fc).map(|(&da, &z)| da * gelu_grad(z)).collect();
            let mut dln2 = vec![F::zero(); n * d];
            matmul_backward(&mut dln2, &mut g[off.w_fc..off.w_fc + d * h], &dfc, &lt.ln2.out, self.t(off.w_fc, d * h), d, h);
            {
                let (dg2, db2) = g[off.ln2_g..off.ln2_g + 2 * d].split_at_mut(d);
                layernorm_backward(&dln2, &lt.ln2, self.t(off.ln2_g, d), dg2, db2, &mut dx);
            }

            // Attention block: x += attn(ln1(x)) Wo
            let mut dy = vec![F::zero(); n * d];
            matmul_backward(&mut dy, &mut g[off.wo..off.wo + d * d], &dx, &lt.y, self.t(off.wo, d * d), d, d);
            let (dq, dk, dv) = self.attention_backward(&dy, lt, n);
            let mut dln1 = vec![F::zero(); n * d];
            matmul_backward(&mut dln1, &mut g[off.wq..off.wq + d * d], &dq, &lt.ln1.out, self.t(off.wq, d * d), d, d);
            matmul_backward(&mut dln1, &mut g[off.wk..off.wk + d * d], &dk, &lt.ln1.out, self.t(off.wk, d * d), d, d);
            matmul_backward(&mut dln1, &mut g[off.wv..off.wv + d * d], &dv, &lt.ln1.out, self.t(off.wv, d * d), d, d);
            let (dg1, db1) = g[off.ln1_g..off.ln1_g + 2 * d].split_at_mut(d);
            layernorm_backward(&dln1, &lt.ln1, self.t(off.ln1_g, d), dg1, db1, &mut dx);
        }

        for (t, (&tok, dxr)) in trace.tokens.iter().zip(dx.chunks_exact(d)).enumerate() {
            let te = lo.tok_emb + tok as usize * d;
            axpy(&mut g[te..te + d], F::one(), dxr);
            let pe = lo.pos_emb + t * d;
            axpy(&mut g[pe..pe + d], F::one(), dxr);
        }
        g
    }

    fn attention_backward(&self, dy: &[F], lt: &LayerTrace<F>, n: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
        let (d, heads, hd) = (self.cfg.embed_dim, self.cfg.n_heads, self.cfg.head_dim());
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut dq = vec![F::zero(); n * d];
        let mut dk = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        let mut datt = vec![F::zero(); n];
        for hh in 0..heads {
            let c = hh * hd..(hh + 1) * hd;
            for t in 0..n {
                let a = &lt.att[(hh * n + t) * n..(hh * n + t) * n + t + 1];
                let dyt = &dy[t * d..][c.clone()];
                let mut weighted = F::zero();
                for (u, &au) in a.iter().enumerate() {
                    datt[u] = dot(dyt, &lt.v[u * d..][c.clone()]);
                    axpy(&mut dv[u * d..][c.clone()], au, dyt);
                    weighted += au * datt[u];
                }
                for (u, &au) in a.iter().enumerate() {
                    let ds = au * (datt[u] - weighted) * scale;
                    if ds != F::zero() {
                        axpy(&mut dq[t * d..][c.clone()], ds, &lt.k[u * d..][c.clone()]);
                        axpy(&mut dk[u * d..][c.clone()], ds, &lt.q[t * d..][c.clone()]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    pub fn start(&self) -> DecodeState<F> {
        let cap = self.cfg.context_len * self.cfg.embed_dim;
        DecodeState {
            k: (0..self.cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            v: (0..self.cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
            logprobs: Vec::new(),
        }
    }

    /// Feeds one token at position `state.len()` and refreshes
    /// `state.logprobs`.
    pub fn step(&self, state: &mut DecodeState<F>, token: u32) -> Result<()> {
        let cfg = self.cfg;
        let lo = self.layout;
        let (d, h, vsz, heads, hd) = (cfg.embed_dim, cfg.hidden_dim(), cfg.vocab_size, cfg.n_heads, cfg.head_dim());
        let pos_i = state.len;
        if pos_i >= cfg.context_len {
            return Err(Error::SequenceTooLong { len: pos_i + 1, max: cfg.context_len });
        }
        if token as usize >= vsz {
            return Err(Error::invalid(format!("token id {token} outside vocabulary of size {vsz}")));
        }
        let emb = self.t(lo.tok_emb, vsz * d);
        let mut x: Vec<F> = emb[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&self.w[lo.pos_emb + pos_i * d..lo.pos_emb + (pos_i + 1) * d])
            .map(|(&e, &p)| e + p)
            .collect();
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let n = pos_i + 1;
        let mut scores = vec![F::zero(); n];
        for (li, off) in lo.layers.iter().enumerate() {
            let a = layernorm(&x, self.t(off.ln1_g, d), self.t(off.ln1_b, d)).out;
            let q = matmul(&a, self.t(off.wq, d * d), d, d);
            state.k[li].extend(matmul(&a, self.t(off.wk, d * d), d, d));
            state.v[li].extend(matmul(&a, self.t(off.wv, d * d), d, d));
            let (kc, vc) = (&state.k[li], &state.v[li]);
            let mut y = vec![F::zero(); d];
            for hh in 0..heads {
                let c = hh * hd..(hh + 1) * hd;
                let mut max = F::neg_infinity();
                for (u, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[c.clone()], &kc[u * d..][c.clone()]) * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = F::one() / sum;
                for (u, s) in scores.iter().enumerate() {
                    axpy(&mut y[c.clone()], *s * inv, &vc[u * d..][c.clone()]);
                }
            }
            axpy(&mut x, F::one(), &matmul(&y, self.t(off.wo, d * d), d, d));
            let m = layernorm(&x, self.t(off.ln2_g, d), self.t(off.ln2_b, d)).out;
            let act: Vec<F> = matmul(&m, self.t(off.w_fc, d * h), d, h).into_iter().map(gelu).collect();
            axpy(&mut x, F::one(), &matmul(&act, self.t(off.w_proj, h * d), h, d));
        }
        let z = layernorm(&x, self.t(lo.lnf_g, d), self.t(lo.lnf_b, d)).out;
        let mut logits: Vec<F> = emb.chunks_exact(d).map(|e| dot(&z, e)).collect();
        log_softmax_in_place(&mut logits);
        state.logprobs = logits;
        state.len = n;
        Ok(())
    }
}
