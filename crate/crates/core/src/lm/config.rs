use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the tiny pre-norm transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 256, embed_dim: 64, n_layers: 2, n_heads: 2, context_len: 128, mlp_mult: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("mlp_mult", self.mlp_mult),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be at least 1")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_mult * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub w_proj: usize,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of every tensor inside the flat parameter buffer.
///
/// Tensor order (also the checkpoint order): `tok_emb [V x d]`,
/// `pos_emb [L x d]`, then per layer `ln1_g [d]`, `ln1_b [d]`, `wq`, `wk`,
/// `wv`, `wo [d x d]`, `ln2_g [d]`, `ln2_b [d]`, `w_fc [d x h]`,
/// `w_proj [h x d]`, and finally `lnf_g [d]`, `lnf_b [d]`. The output
/// projection is tied to `tok_emb`. Matrices are row-major `[in x out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
    pub tensors: Vec<TensorInfo>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, l, h) = (cfg.vocab_size, cfg.embed_dim, cfg.context_len, cfg.hidden_dim());
        let mut tensors = Vec::new();
        let mut cursor = 0;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, offset, shape, init });
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d], InitKind::Normal);
        let pos_emb = push("pos_emb".into(), vec![l, d], InitKind::Normal);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut p = |n: &str, shape: Vec<usize>, init| push(format!("layer{i}.{n}"), shape, init);
            layers.push(LayerOffsets {
                ln1_g: p("ln1_g", vec![d], InitKind::Ones),
                ln1_b: p("ln1_b", vec![d], InitKind::Zeros),
                wq: p("wq", vec![d, d], InitKind::Normal),
                wk: p("wk", vec![d, d], InitKind::Normal),
                wv: p("wv", vec![d, d], InitKind::Normal),
                wo: p("wo", vec![d, d], InitKind::Normal),
                ln2_g: p("ln2_g", vec![d], InitKind::Ones),
                ln2_b: p("ln2_b", vec![d], InitKind::Zeros),
                w_fc: p("w_fc", vec![d, h], InitKind::Normal),
                w_proj: p("w_proj", vec![h, d], InitKind::Normal),
            });
        }
        let lnf_g = push("lnf_g".into(), vec![d], InitKind::Ones);
        let lnf_b = push("lnf_b".into(), vec![d], InitKind::Zeros);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, total: cursor, tensors }
    }
}
