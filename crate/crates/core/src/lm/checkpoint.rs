//! Binary checkpoint format (all integers and floats little-endian):
//!
//! | bytes      | content                                                  |
//! |------------|----------------------------------------------------------|
//! | 8          | magic `POPCKPT1` (the trailing digit is the version)     |
//! | 4          | `u32` length `n` of the JSON-encoded [`ModelConfig`]     |
//! | n          | the JSON config                                          |
//! | 4 * P      | all parameters as `f32`, in [`Layout`](super::Layout) order |
//! | 1          | optimizer flag: 0 = absent, 1 = present                  |
//!
//! When the flag is 1 it is followed by `step: u64`, `lr`, `beta1`, `beta2`,
//! `eps` as `f64`, then the first and second moments as `P` `f32` each.
//! The loader checks the magic and that the file length is exactly what the
//! config implies.

use std::io::Write;
use std::path::Path;

use super::config::{Layout, ModelConfig};
use super::optim::{AdamConfig, OptimizerState};
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POPCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, opt: Option<&OptimizerState>) -> Result<()> {
    let cfg = serde_json::to_vec(params.config())?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    write_f32s(&mut w, params.as_slice())?;
    match opt {
        None => w.write_all(&[0])?,
        Some(st) => {
            if st.m.len() != params.len() {
                return Err(Error::invalid("optimizer state does not match parameters"));
            }
            w.write_all(&[1])?;
            w.write_all(&st.step.to_le_bytes())?;
            for x in [st.config.lr, st.config.beta1, st.config.beta2, st.config.eps] {
                w.write_all(&x.to_le_bytes())?;
            }
            write_f32s(&mut w, &st.m)?;
            write_f32s(&mut w, &st.v)?;
        }
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelParams, Option<OptimizerState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        if magic.starts_with(b"POPCKPT") {
            return Err(Error::Checkpoint(format!("unsupported version {:?}", magic[7] as char)));
        }
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total = Layout::new(&cfg).total;

    let header = 8 + 4 + n;
    let without_opt = header + 4 * total + 1;
    let with_opt = without_opt + 8 + 4 * 8 + 8 * total;
    if bytes.len() != without_opt && bytes.len() != with_opt {
        return Err(Error::Checkpoint(format!(
            "length {} matches neither {without_opt} (no optimizer) nor {with_opt} (with optimizer)",
            bytes.len()
        )));
    }

    let data = r.f32s(total)?;
    let params = ModelParams::from_raw(cfg, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let opt = match r.take(1)?[0] {
        0 if bytes.len() == without_opt => None,
        1 if bytes.len() == with_opt => {
            let step = r.u64()?;
            let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let m = r.f32s(total)?;
            let v = r.f32s(total)?;
            Some(OptimizerState { config, step, m, v })
        }
        flag => return Err(Error::Checkpoint(format!("optimizer flag {flag} inconsistent with file length"))),
    };
    Ok((params, opt))
}

/// Writes atomically: a temporary file in the same directory is renamed
/// over `path` only once complete.
pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: Option<&OptimizerState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, opt)?;
    crate::io::atomic_write(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerState>)> {
    read_checkpoint(&std::fs::read(path)?)
}
