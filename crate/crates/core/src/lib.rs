//! Sequence unlearning for small causal language models.
//!
//! The crate pretrains a tiny byte-level transformer, measures how strongly
//! it has memorized particular sequences, and removes that memorization with
//! gradient-ascent objectives anchored to a frozen copy of the model.
//!
//! * [`corpus`]: byte tokenizer, synthetic documents, forget / retain /
//!   held-out splits.
//! * [`lm`]: the model, its exact gradients, the optimizer and decoding.
//! * [`losses`]: NLL, gradient-ascent, hard and soft retain losses, and
//!   their combination.
//! * [`metrics`]: memorization accuracy, extraction likelihood, remnant
//!   memorization accuracy, BLEU / chrF and forgetting thresholds.
//! * [`unlearn`]: batch and sequential unlearning with metric-gated stopping.
//! * [`experiment`]: end-to-end scenarios and the extraction evaluation.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lm;
pub mod losses;
pub mod metrics;
pub mod unlearn;

pub use corpus::{ByteTokenizer, CorpusSplit, Split, TokenSeq};
pub use error::{Error, Result};
pub use lm::{LanguageModel, ModelConfig, ModelParams, OptimizerState};
pub use losses::{LossBreakdown, Method};
pub use metrics::{ForgettingThresholds, MetricTriple};
pub use unlearn::{StopReason, UnlearnConfig, UnlearnTrace};



