//! File output. Everything goes through temp-file-plus-rename so an
//! interrupted run never leaves a truncated file at its final path.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    seqforget::io::atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_bytes(path, &buf)
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, &csv_bytes(rows)?)
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Wall-clock bookkeeping for one command. Timestamps live only in
/// `metadata/<command>.json` so every other output is reproducible.
pub struct RunMeta {
    command: &'static str,
    started_unix_ms: u128,
}

#[derive(Serialize)]
struct MetaFile<'a> {
    command: &'a str,
    version: &'a str,
    args: Vec<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    outputs: &'a [String],
}

impl RunMeta {
    pub fn start(command: &'static str) -> Self {
        RunMeta { command, started_unix_ms: unix_ms() }
    }

    pub fn finish(self, run_dir: &Path, outputs: &[String]) -> Result<()> {
        let meta = MetaFile {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().skip(1).collect(),
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: unix_ms(),
            outputs,
        };
        write_json(&run_dir.join("metadata").join(format!("{}.json", self.command)), &meta)
    }
}
