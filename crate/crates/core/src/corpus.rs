//! Byte-level tokenization, the synthetic document family, and
//! forget / retain / held-out curation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Default forget-batch size.
pub const DEFAULT_FORGET_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Heldout,
    Generated,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Heldout => "heldout",
            Split::Generated => "generated",
        };
        f.write_str(s)
    }
}

/// A token sequence with an identifier and an optional provenance tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub id: String,
    pub tokens: Vec<u32>,
    pub split: Option<Split>,
}

impl TokenSeq {
    /// Builds a sequence, rejecting anything shorter than two tokens.
    pub fn new(id: impl Into<String>, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort { len: tokens.len(), min: 2 });
        }
        Ok(TokenSeq { id: id.into(), tokens, split: None })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Raw UTF-8 bytes as tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer {
    pub max_len: usize,
}

impl ByteTokenizer {
    pub fn new(max_len: usize) -> Self {
        ByteTokenizer { max_len }
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Err(Error::invalid("cannot tokenize empty text"));
        }
        if text.len() > self.max_len {
            return Err(Error::SequenceTooLong { len: text.len(), max: self.max_len });
        }
        Ok(text.bytes().map(u32::from).collect())
    }

    /// Tokenizes into a [`TokenSeq`]; one-byte texts are rejected because
    /// they contain no prediction position.
    pub fn tokenize(&self, id: impl Into<String>, text: &str) -> Result<TokenSeq> {
        TokenSeq::new(id, self.encode(text)?)
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let bytes = to_bytes(tokens)?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("not valid UTF-8: {e}")))
    }

    /// Like [`detokenize`](Self::detokenize) but replaces invalid UTF-8
    /// (model samples need not be well-formed).
    pub fn detokenize_lossy(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn to_bytes(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::invalid(format!("token {t} is not a byte"))))
        .collect()
}

const NAMES: &[&str] = &[
    "ada", "bram", "cleo", "dov", "edda", "finn", "gia", "hugo", "ines", "joss", "kai", "lena",
    "milo", "nora", "otto", "pia", "quin", "rosa", "sven", "tara", "ugo", "vera", "wim", "yara",
];
const CITIES: &[&str] = &[
    "oslo", "lima", "kyiv", "riga", "bern", "doha", "baku", "suva", "apia", "male", "rome",
    "nice", "lyon", "cork", "gent", "linz",
];
const STREETS: &[&str] = &[
    "elm", "oak", "pine", "birch", "cedar", "maple", "ash", "willow", "hazel", "alder", "fir",
    "larch",
];
const ITEMS: &[&str] = &["coins", "books", "lamps", "kites", "pears", "boats"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

fn clause(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..6) {
        0 => format!("{} lives at {} {} road.", pick(rng, NAMES), digits(rng, 3), pick(rng, STREETS)),
        1 => format!("the pin of {} is {}.", pick(rng, NAMES), digits(rng, 4)),
        2 => format!(
            "{} met {} in {} on day {}.",
            pick(rng, NAMES),
            pick(rng, NAMES),
            pick(rng, CITIES),
            digits(rng, 2)
        ),
        3 => format!("call {} at {}-{}.", pick(rng, NAMES), digits(rng, 3), digits(rng, 4)),
        4 => format!("{} owes {} {} {}.", pick(rng, NAMES), pick(rng, NAMES), digits(rng, 2), pick(rng, ITEMS)),
        _ => format!("order {} ships to {}.", digits(rng, 5), pick(rng, CITIES)),
    }
}

/// Generates `n_docs` distinct templated documents whose byte lengths lie in
/// `len_range` (inclusive). Pure function of its arguments.
pub fn synth_corpus(
    tokenizer: &ByteTokenizer,
    seed: u64,
    n_docs: usize,
    len_range: (usize, usize),
) -> Result<Vec<TokenSeq>> {
    let (min, max) = len_range;
    if n_docs == 0 {
        return Err(Error::invalid("n_docs must be at least 1"));
    }
    if min < 2 || min > max {
        return Err(Error::invalid(format!("impossible length bounds ({min}, {max})")));
    }
    if max > tokenizer.max_len {
        return Err(Error::invalid(format!(
            "max length {max} exceeds the context length {}",
            tokenizer.max_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n_docs);
    let mut docs = Vec::with_capacity(n_docs);
    let mut attempts = 0usize;
    while docs.len() < n_docs {
        attempts += 1;
        if attempts > 100 * n_docs + 1000 {
            return Err(Error::invalid(format!(
                "could not draw {n_docs} distinct documents with lengths in [{min}, {max}]"
            )));
        }
        let target = rng.gen_range(min..=max);
        let mut text = clause(&mut rng);
        while text.len() < target {
            text.push(' ');
            text.push_str(&clause(&mut rng));
        }
        text.truncate(target);
        if !seen.insert(text.clone()) {
            continue;
        }
        let id = format!("doc-{:05}", docs.len());
        docs.push(tokenizer.tokenize(id, &text)?);
    }
    Ok(docs)
}

/// Forget / retain / held-out partitions of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub forget_batches: Vec<Vec<TokenSeq>>,
    pub retain_pool: Vec<TokenSeq>,
    pub heldout: Vec<TokenSeq>,
}

/// On-disk record of a split, by sequence id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub forget_batches: Vec<Vec<String>>,
    pub retain: Vec<String>,
    pub heldout: Vec<String>,
    pub seed: u64,
}

/// Shuffles `corpus` with `seed` and carves out forget batches, then the
/// held-out set (`round(heldout_frac * N)` sequences), then the retain pool.
pub fn make_splits(
    corpus: &[TokenSeq],
    n_forget_batches: usize,
    forget_batch_size: usize,
    heldout_frac: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if forget_batch_size == 0 {
        return Err(Error::invalid("forget batches must be non-empty"));
    }
    if !(0.0..1.0).contains(&heldout_frac) {
        return Err(Error::invalid(format!("heldout fraction {heldout_frac} not in [0, 1)")));
    }
    let mut ids = HashSet::with_capacity(corpus.len());
    if let Some(dup) = corpus.iter().find(|s| !ids.insert(s.id.as_str())) {
        return Err(Error::invalid(format!("duplicate sequence id {:?}", dup.id)));
    }

    let n = corpus.len();
    let n_forget = n_forget_batches * forget_batch_size;
    let n_heldout = (heldout_frac * n as f64).round() as usize;
    if n_forget + n_heldout >= n {
        return Err(Error::invalid(format!(
            "corpus of {n} sequences cannot hold {n_forget} forget, {n_heldout} heldout and a non-empty retain pool"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tagged = |i: usize, split: Split| corpus[i].clone().with_split(split);

    let forget_batches = order[..n_forget]
        .chunks(forget_batch_size)
        .map(|c| c.iter().map(|&i| tagged(i, Split::Forget)).collect())
        .collect();
    let heldout = order[n_forget..n_forget + n_heldout].iter().map(|&i| tagged(i, Split::Heldout)).collect();
    let retain_pool = order[n_forget + n_heldout..].iter().map(|&i| tagged(i, Split::Retain)).collect();
    Ok(CorpusSplit { forget_batches, retain_pool, heldout })
}

impl CorpusSplit {
    pub fn forget(&self) -> impl Iterator<Item = &TokenSeq> {
        self.forget_batches.iter().flatten()
    }

    /// Everything the model may be pretrained on: forget and retain
    /// sequences, never the held-out set.
    pub fn pretraining_data(&self) -> Vec<TokenSeq> {
        self.forget().chain(&self.retain_pool).cloned().collect()
    }

    pub fn manifest(&self, seed: u64) -> SplitManifest {
        let ids = |xs: &[TokenSeq]| xs.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        SplitManifest {
            forget_batches: self.forget_batches.iter().map(|b| ids(b)).collect(),
            retain: ids(&self.retain_pool),
            heldout: ids(&self.heldout),
            seed,
        }
    }

    /// Resolves a manifest against a corpus; unknown or repeated ids are errors.
    pub fn from_manifest(corpus: &[TokenSeq], manifest: &SplitManifest) -> Result<Self> {
        let by_id: HashMap<&str, &TokenSeq> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut used = HashSet::new();
        let mut resolve = |ids: &[String], split: Split| -> Result<Vec<TokenSeq>> {
            ids.iter()
                .map(|id| {
                    if !used.insert(id.clone()) {
                        return Err(Error::invalid(format!("id {id:?} appears in more than one partition")));
                    }
                    by_id
                        .get(id.as_str())
                        .map(|s| (*s).clone().with_split(split))
                        .ok_or_else(|| Error::invalid(format!("id {id:?} not found in corpus")))
                })
                .collect()
        };
        let mut forget_batches = Vec::with_capacity(manifest.forget_batches.len());
        for batch in &manifest.forget_batches {
            if batch.is_empty() {
                return Err(Error::invalid("empty forget batch in manifest"));
            }
            forget_batches.push(resolve(batch, Split::Forget)?);
        }
        let retain_pool = resolve(&manifest.retain, Split::Retain)?;
        let heldout = resolve(&manifest.heldout, Split::Heldout)?;
        Ok(CorpusSplit { forget_batches, retain_pool, heldout })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Reads a JSON Lines corpus (`id`, `text`, optional `split`). Blank lines
/// are skipped; anything else malformed is reported with its line number.
pub fn read_jsonl(path: &Path, tokenizer: &ByteTokenizer) -> Result<Vec<TokenSeq>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, msg };
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !ids.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        let mut seq = tokenizer.tokenize(rec.id, &rec.text).map_err(|e| err(e.to_string()))?;
        seq.split = rec.split;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, seqs: &[TokenSeq], tokenizer: &ByteTokenizer) -> Result<()> {
    for s in seqs {
        let line = CorpusLine { id: s.id.clone(), text: tokenizer.detokenize(&s.tokens)?, split: s.split };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
