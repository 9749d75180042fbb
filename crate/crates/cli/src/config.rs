//! Config resolution. Precedence is flags, then the config file, then
//! defaults. Commands after `pretrain` fall back to the `config.json` that
//! `pretrain` saved in the run directory, so one run stays self-consistent.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use seqforget::experiment::ExperimentConfig;

use crate::{Global, OUT_ENV};

pub const SAVED_CONFIG: &str = "config.json";

fn read(path: &Path) -> Result<ExperimentConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
}

/// The run directory and the effective config, before command flags.
pub fn resolve(g: &Global, use_saved: bool) -> Result<(PathBuf, ExperimentConfig)> {
    let from_file = g.config.as_deref().map(read).transpose()?;
    let out = g
        .out
        .clone()
        .or_else(|| from_file.as_ref().and_then(|c| c.out_dir.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("seqforget-out"));
    let mut cfg = match from_file {
        Some(c) => c,
        None => {
            let saved = out.join(SAVED_CONFIG);
            if use_saved && saved.exists() {
                read(&saved)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.unlearn.seed = seed;
    }
    Ok((out, cfg))
}
