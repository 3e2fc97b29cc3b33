//! CSV rendering, atomic file writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adlab::experiments::ExperimentReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunFile;
use crate::exit::Failure;

pub const MANIFEST_NAME: &str = "manifest.json";

/// CSV text of a report: `#` lines documenting the experiment and every
/// column, then the header row and the data rows.
pub fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# experiment: {}\n", report.kind.name()));
    out.push_str(&format!("# anchor: {}\n", report.kind.anchor()));
    out.push_str(&format!("# bound: {}\n", report.kind.bound()));
    out.push_str(&format!("# root_seed: {}\n", report.root_seed));
    for c in &report.columns {
        out.push_str(&format!("# column {}: {}\n", c.name, c.doc));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(report.columns.iter().map(|c| c.name)).expect("in-memory write");
    for row in &report.rows {
        w.write_record(row.iter().map(|v| v.render())).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells"));
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub passed: bool,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub name: String,
    pub anchor: String,
    pub csv: PathBuf,
    pub sha256: String,
    pub rows: usize,
    pub passed: bool,
    pub config_hash: String,
    pub checks: Vec<CheckEntry>,
    pub environment: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub root_seed: u64,
    pub workers: usize,
    /// The run file exactly as executed, overrides applied.
    pub config: RunFile,
    pub experiments: Vec<ExperimentEntry>,
    pub passed: bool,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn entry(report: &ExperimentReport, csv: PathBuf, text: &str) -> ExperimentEntry {
    ExperimentEntry {
        name: report.kind.name().to_string(),
        anchor: report.kind.anchor().to_string(),
        csv,
        sha256: sha256_hex(text.as_bytes()),
        rows: report.rows.len(),
        passed: report.passed(),
        config_hash: report.config_hash.clone(),
        checks: report
            .checks
            .iter()
            .map(|c| CheckEntry {
                name: c.name.clone(),
                passed: c.passed,
                value: finite(c.value),
                threshold: finite(c.threshold),
                detail: c.detail.clone(),
            })
            .collect(),
        environment: report.environment.clone(),
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<RunManifest, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::schema(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::schema(format!("manifest {}: {e}", path.display())))
    }
}
