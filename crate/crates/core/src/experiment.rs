//! End-to-end scenarios: a synthetic corpus, a pretrained model that has
//! memorized its forget batches, and forgetting thresholds from held-out
//! data. Also the extraction evaluation, which samples continuations of the
//! first half of each target and scores them against the true second half.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_splits, read_jsonl, synth_corpus, ByteTokenizer, CorpusSplit, TokenSeq};
use crate::error::{Error, Result};
use crate::lm::{init_params, pretrain, top_p_sample, AdamConfig, LanguageModel, ModelConfig, ModelParams, OptimizerState};
use crate::metrics::{bleu, chrf, compute_thresholds, evaluate_set, mean_triple, ForgettingThresholds};
use crate::unlearn::UnlearnConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// JSON Lines corpus; when absent a synthetic corpus is generated.
    pub path: Option<PathBuf>,
    pub n_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_forget_batches: usize,
    pub forget_batch_size: usize,
    pub heldout_frac: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            path: None,
            n_docs: 200,
            min_len: 40,
            max_len: 64,
            n_forget_batches: 1,
            forget_batch_size: 8,
            heldout_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop once every forget batch has mean MA at least this; `None` runs
    /// all `max_epochs`.
    pub target_forget_ma: Option<f64>,
    /// Epochs between memorization checks.
    pub check_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings { max_epochs: 400, batch_size: 8, lr: 1e-3, target_forget_ma: Some(0.9), check_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSettings {
    pub p_values: Vec<f64>,
    pub samples: usize,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings { p_values: vec![0.9, 0.7, 0.5], samples: 50 }
    }
}

impl ExtractionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.p_values.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::invalid("p values must be non-empty and lie in (0, 1]"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples per target must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainSettings,
    pub unlearn: UnlearnConfig,
    pub extraction: ExtractionSettings,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.unlearn.validate()?;
        self.extraction.validate()?;
        let c = &self.corpus;
        if c.min_len < 2 || c.min_len > c.max_len || c.max_len > self.model.context_len {
            return Err(Error::invalid("corpus lengths must satisfy 2 <= min_len <= max_len <= context_len"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.check_every == 0 || !(p.lr > 0.0) {
            return Err(Error::invalid("pretraining batch size, check interval and lr must be positive"));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer::new(self.model.context_len)
    }

    /// The corpus named by the config: read from disk or synthesized.
    pub fn load_corpus(&self) -> Result<Vec<TokenSeq>> {
        let tok = self.tokenizer();
        match &self.corpus.path {
            Some(path) => read_jsonl(path, &tok),
            None => synth_corpus(&tok, self.seed, self.corpus.n_docs, (self.corpus.min_len, self.corpus.max_len)),
        }
    }

    pub fn split(&self, corpus: &[TokenSeq]) -> Result<CorpusSplit> {
        let c = &self.corpus;
        make_splits(corpus, c.n_forget_batches, c.forget_batch_size, c.heldout_frac, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-sequence training NLL of every epoch run.
    pub curve: Vec<f64>,
    /// Mean forget-set MA at each check, as `(epoch, ma)`.
    pub checks: Vec<(usize, f64)>,
    pub reached_target: bool,
}

/// Pretrains until every batch in `forget_batches` has mean MA at least
/// the target, checking every `check_every` epochs.
pub fn pretrain_until_memorized(
    params: &mut ModelParams,
    data: &[TokenSeq],
    forget_batches: &[Vec<TokenSeq>],
    settings: &PretrainSettings,
    seed: u64,
) -> Result<PretrainReport> {
    let mut opt = OptimizerState::for_params(params, AdamConfig { lr: settings.lr, ..Default::default() });
    let mut curve = Vec::new();
    let mut checks = Vec::new();
    let forget_ma = |p: &ModelParams| -> Result<f64> {
        let mut worst: f64 = 1.0;
        for b in forget_batches {
            let ma: f64 = b.par_iter().map(|x| crate::metrics::ma(p, &x.tokens)).collect::<Result<Vec<_>>>()?.iter().sum();
            worst = worst.min(ma / b.len() as f64);
        }
        Ok(worst)
    };
    let mut reached = false;
    while curve.len() < settings.max_epochs {
        let k = settings.check_every.min(settings.max_epochs - curve.len());
        // the shuffle seed advances with the epoch count so chunks differ
        curve.extend(pretrain(params, data, k, settings.batch_size, &mut opt, seed.wrapping_add(curve.len() as u64))?);
        let ma = forget_ma(params)?;
        checks.push((curve.len(), ma));
        if settings.target_forget_ma.is_some_and(|t| ma >= t) {
            reached = true;
            break;
        }
    }
    Ok(PretrainReport { curve, checks, reached_target: reached })
}

/// Everything needed to run unlearning experiments.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub split: CorpusSplit,
    pub params: ModelParams,
    pub pretrain: PretrainReport,
    pub thresholds: ForgettingThresholds,
}

/// Synthesizes (or loads) the corpus, splits it, pretrains a fresh model on
/// forget plus retain data until memorization, and computes thresholds on
/// the held-out set.
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    let split = cfg.split(&corpus)?;
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let report =
        pretrain_until_memorized(&mut params, &split.pretraining_data(), &split.forget_batches, &cfg.pretrain, cfg.seed)?;
    let thresholds = compute_thresholds(&params, &split.heldout, cfg.unlearn.el_order, "heldout")?;
    Ok(Scenario { split, params, pretrain: report, thresholds })
}

/// Mean forget-set metrics of `model` on `seqs`.
pub fn mean_metrics<M: LanguageModel + ?Sized>(model: &M, seqs: &[TokenSeq], n: usize) -> Result<crate::MetricTriple> {
    mean_triple(&evaluate_set(model, seqs, n)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRow {
    pub target_id: String,
    pub p: Option<f64>,
    pub sample: usize,
    pub bleu: Option<f64>,
    pub chrf: Option<f64>,
    /// Set when the target was skipped.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreStats {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut s = ScoreStats { mean: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY };
        for &x in xs {
            s.mean += x;
            s.min = s.min.min(x);
            s.max = s.max.max(x);
        }
        s.mean /= xs.len() as f64;
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PAggregate {
    pub p: f64,
    pub count: usize,
    pub bleu: Option<ScoreStats>,
    pub chrf: Option<ScoreStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub settings: ExtractionSettings,
    pub seed: u64,
    pub rows: Vec<ExtractionRow>,
    pub aggregates: Vec<PAggregate>,
}

impl ExtractionReport {
    pub fn aggregate(&self, p: f64) -> Option<&PAggregate> {
        self.aggregates.iter().find(|a| a.p == p)
    }
}

/// Seed of one sample; a fixed mix of the run seed and the sample's
/// coordinates, independent of scheduling.
fn sample_seed(seed: u64, target: usize, p_index: usize, sample: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [target as u64, p_index as u64, sample as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// For each target: prefix is the first `floor(T/2)` tokens, and
/// `ceil(T/2)` tokens are sampled per (p, sample) and scored against the
/// true suffix with BLEU on tokens and chrF on text. Targets shorter than
/// four tokens produce a single warning row.
pub fn extraction_eval<M: LanguageModel + ?Sized>(
    model: &M,
    targets: &[TokenSeq],
    tokenizer: &ByteTokenizer,
    settings: &ExtractionSettings,
    seed: u64,
) -> Result<ExtractionReport> {
    settings.validate()?;
    let jobs: Vec<(usize, usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= 4)
        .flat_map(|(ti, _)| {
            (0..settings.p_values.len()).flat_map(move |pi| (0..settings.samples).map(move |s| (ti, pi, s)))
        })
        .collect();

    let scored: Vec<((usize, usize, usize), ExtractionRow)> = jobs
        .par_iter()
        .map(|&(ti, pi, s)| {
            let x = &targets[ti].tokens;
            let half = x.len() / 2;
            let p = settings.p_values[pi];
            let full = top_p_sample(model, &x[..half], x.len() - half, p, sample_seed(seed, ti, pi, s))?;
            let (gen, truth) = (&full[half..], &x[half..]);
            let row = ExtractionRow {
                target_id: targets[ti].id.clone(),
                p: Some(p),
                sample: s,
                bleu: Some(bleu(gen, truth)?),
                chrf: Some(chrf(&tokenizer.detokenize_lossy(gen), &tokenizer.detokenize_lossy(truth))?),
                warning: None,
            };
            Ok(((ti, pi, s), row))
        })
        .collect::<Result<_>>()?;

    let mut keyed = scored;
    for (ti, t) in targets.iter().enumerate().filter(|(_, t)| t.len() < 4) {
        keyed.push((
            (ti, 0, 0),
            ExtractionRow {
                target_id: t.id.clone(),
                p: None,
                sample: 0,
                bleu: None,
                chrf: None,
                warning: Some(format!("target of length {} is shorter than 4 tokens; skipped", t.len())),
            },
        ));
    }
    keyed.sort_by_key(|(k, _)| *k);
    let rows: Vec<ExtractionRow> = keyed.into_iter().map(|(_, r)| r).collect();

    let aggregates = settings
        .p_values
        .iter()
        .map(|&p| {
            let of_p: Vec<&ExtractionRow> = rows.iter().filter(|r| r.p == Some(p)).collect();
            let b: Vec<f64> = of_p.iter().filter_map(|r| r.bleu).collect();
            let c: Vec<f64> = of_p.iter().filter_map(|r| r.chrf).collect();
            PAggregate { p, count: b.len(), bleu: ScoreStats::of(&b), chrf: ScoreStats::of(&c) }
        })
        .collect();
    Ok(ExtractionReport { settings: settings.clone(), seed, rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TableModel;

    #[test]
    fn memorizing_model_extracts_everything() {
        let tok = ByteTokenizer::new(64);
        let targets = vec![tok.tokenize("a", "alpha beta gamma").unwrap(), tok.tokenize("b", "seven eight").unwrap()];
        let seqs: Vec<&[u32]> = targets.iter().map(|t| t.tokens.as_slice()).collect();
        let m = TableModel::memorizing(256, 64, &seqs).unwrap();
        let settings = ExtractionSettings { p_values: vec![0.9, 0.5], samples: 3 };
        let r = extraction_eval(&m, &targets, &tok, &settings, 1).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 3);
        assert!(r.rows.iter().all(|row| row.bleu == Some(1.0) && row.chrf == Some(1.0)));
        assert_eq!(r.aggregate(0.9).unwrap().bleu.as_ref().unwrap().mean, 1.0);
    }

    #[test]
    fn short_targets_get_warning_rows() {
        let tok = ByteTokenizer::new(16);
        let targets = vec![tok.tokenize("s", "ab").unwrap(), tok.tokenize("l", "abcdef").unwrap()];
        let m = TableModel::new(256, 16);
        let settings = ExtractionSettings { p_values: vec![0.7], samples: 2 };
        let r = extraction_eval(&m, &targets, &tok, &settings, 3).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows[0].warning.is_some());
        assert_eq!(r.aggregate(0.7).unwrap().count, 2);
    }

    #[test]
    fn aggregates_are_row_means() {
        let tok = ByteTokenizer::new(32);
        let targets = vec![tok.tokenize("t", "hello world again").unwrap()];
        let m = TableModel::new(256, 32);
        let settings = ExtractionSettings { p_values: vec![0.9], samples: 7 };
        let r = extraction_eval(&m, &targets, &tok, &settings, 11).unwrap();
        let mean = r.rows.iter().map(|x| x.chrf.unwrap()).sum::<f64>() / 7.0;
        assert!((r.aggregates[0].chrf.as_ref().unwrap().mean - mean).abs() < 1e-12);
        assert_eq!(r, extraction_eval(&m, &targets, &tok, &settings, 11).unwrap());
    }

    #[test]
    fn config_defaults_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.extraction.p_values, vec![0.9, 0.7, 0.5]);
        assert_eq!(cfg.extraction.samples, 50);
    }
}
