//! Run manifests and small helpers for writing JSON and CSV reports.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::Command;

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub config: &'a Command,
    pub workers: usize,
    pub exit_code: i32,
    pub elapsed_s: f64,
    pub finished_unix_s: u64,
}

impl<'a> RunManifest<'a> {
    pub fn new(argv: &[OsString], config: &'a Command, workers: usize, exit_code: i32, elapsed_s: f64) -> Self {
        let finished_unix_s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: "voxdiff",
            version: env!("CARGO_PKG_VERSION"),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            config,
            workers,
            exit_code,
            elapsed_s,
            finished_unix_s,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("run.json"), self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `rows` as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
