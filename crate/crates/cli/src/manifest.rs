//! Run manifests: every subcommand records its outputs with the resolved
//! config, config hash, seed and build id.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::config::RunConfig;

pub const BUILD_ID: &str = env!("CTXDIFF_BUILD_ID");

/// CSV columns holding wall-clock measurements.
pub const TIMING_COLUMNS: &[&str] = &["wall_ms"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    /// Hash of the file with timing columns blanked, so identical runs
    /// record identical hashes.
    pub sha256: String,
    pub has_timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub build_id: String,
    pub wall_time_ms: u64,
    pub config: RunConfig,
    pub outputs: Vec<OutputEntry>,
}

/// Blanks the values of `TIMING_COLUMNS` in a CSV document. Returns `None`
/// when the header has no such column.
pub fn mask_timing_csv(text: &str) -> Option<String> {
    let mut lines = text.lines();
    let header = lines.next()?;
    let cols: Vec<usize> = header
        .split(',')
        .enumerate()
        .filter(|(_, h)| TIMING_COLUMNS.contains(h))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return None;
    }
    let mut out = String::with_capacity(text.len());
    out.push_str(header);
    out.push('\n');
    for line in lines {
        let fields: Vec<&str> = line
            .split(',')
            .enumerate()
            .map(|(i, f)| if cols.contains(&i) { "" } else { f })
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Some(out)
}

/// Collects output files of one subcommand and writes its manifest.
pub struct Recorder {
    subcommand: String,
    started: Instant,
    outputs: Vec<OutputEntry>,
}

impl Recorder {
    pub fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            started: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        self.record(path, bytes);
        Ok(())
    }

    /// Registers a file written elsewhere.
    pub fn record(&mut self, path: &Path, bytes: &[u8]) {
        let masked = std::str::from_utf8(bytes).ok().and_then(mask_timing_csv);
        let sha256 = sha256_hex(masked.as_deref().map_or(bytes, str::as_bytes));
        self.outputs.push(OutputEntry {
            path: path.to_path_buf(),
            sha256,
            has_timing: masked.is_some(),
        });
    }

    pub fn record_file(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = fs::read(path)?;
        self.record(path, &bytes);
        Ok(())
    }

    /// Writes `<report_dir>/<subcommand>.manifest.json`.
    pub fn finish(self, cfg: &RunConfig) -> std::io::Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            build_id: BUILD_ID.to_string(),
            wall_time_ms: self.started.elapsed().as_millis() as u64,
            config: cfg.clone(),
            outputs: self.outputs,
        };
        let path = cfg.paths.report_dir.join(format!("{}.manifest.json", self.subcommand));
        fs::create_dir_all(&cfg.paths.report_dir)?;
        let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
