use std::path::{Path, PathBuf};

use adlab::experiments::ExperimentReport;

use crate::config::RunFile;
use crate::exit::{self, Failure};
use crate::output::{entry, render_csv, write_atomic, RunManifest, MANIFEST_NAME};

pub struct RunOptions<'a> {
    pub out: Option<&'a Path>,
    pub workers: usize,
    pub quiet: bool,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub reports: Vec<ExperimentReport>,
}

impl RunOutcome {
    pub fn code(&self) -> i32 {
        if self.manifest.passed {
            exit::PASS
        } else {
            exit::BOUND
        }
    }
}

fn print_report(report: &ExperimentReport, csv: &Path) {
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} {} ({} rows) -> {}", report.kind.name(), report.rows.len(), csv.display());
    for c in &report.checks {
        println!("  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            for f in &c.failures {
                println!("       row {f}");
            }
        }
    }
}

/// Runs every planned experiment, then writes the CSVs and the manifest.
/// Nothing is written if any experiment errors.
pub fn execute(file: &RunFile, opts: &RunOptions<'_>) -> Result<RunOutcome, Failure> {
    let plan = file.plan()?;
    let dir = file.output_dir(opts.out);
    let started = chrono::Utc::now().to_rfc3339();
    let mut reports = Vec::with_capacity(plan.len());
    for p in &plan {
        let report = p
            .kind
            .run(&p.config, file.run.seed)
            .map_err(|e| Failure::from_lib(e).prefixed(&format!("experiment.{}", p.kind.name())))?;
        reports.push(report);
    }
    let mut entries = Vec::with_capacity(reports.len());
    for (p, report) in plan.iter().zip(&reports) {
        let base = p.config.output_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| dir.clone());
        let path = base.join(format!("{}.csv", p.kind.name()));
        let text = render_csv(report);
        write_atomic(&path, text.as_bytes())?;
        if !opts.quiet {
            print_report(report, &path);
        }
        entries.push(entry(report, path, &text));
    }
    let manifest = RunManifest {
        tool: "adlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        root_seed: file.run.seed,
        workers: opts.workers,
        config: file.clone(),
        passed: entries.iter().all(|e| e.passed),
        experiments: entries,
    };
    let manifest_path = dir.join(MANIFEST_NAME);
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    Ok(RunOutcome {
        manifest,
        manifest_path,
        reports,
    })
}

/// Reruns the configuration echoed in a manifest and compares CSV hashes.
pub fn replay(previous: &RunManifest, opts: &RunOptions<'_>) -> Result<i32, Failure> {
    let outcome = execute(&previous.config, opts)?;
    let mut mismatches = 0;
    for old in &previous.experiments {
        match outcome.manifest.experiments.iter().find(|e| e.name == old.name) {
            Some(new) if new.sha256 == old.sha256 => println!("same {} sha256 {}", old.name, old.sha256),
            Some(new) => {
                mismatches += 1;
                println!("DIFF {} sha256 {} != {}", old.name, new.sha256, old.sha256);
            }
            None => {
                mismatches += 1;
                println!("DIFF {} missing from the rerun", old.name);
            }
        }
    }
    Ok(if mismatches > 0 { exit::BOUND } else { outcome.code() })
}
