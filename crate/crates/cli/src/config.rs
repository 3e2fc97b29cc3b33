//! Run files: a `[run]` table and one `[experiment.<name>]` table per
//! experiment, each overriding that experiment's defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adlab::experiments::{ExperimentConfig, ExperimentKind};
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

/// Environment variable that overrides the output directory of a run file.
pub const OUTPUT_DIR_ENV: &str = "ADLAB_OUTPUT_DIR";

const DEFAULT_OUTPUT_DIR: &str = "adlab-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// Experiments to run, in order; absent means every `[experiment.*]` table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiments: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub run: RunSection,
    #[serde(default)]
    pub experiment: BTreeMap<String, toml::Table>,
}

/// One experiment with its fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
}

pub fn known_names() -> String {
    ExperimentKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}

pub fn parse_kind(name: &str) -> Result<ExperimentKind, Failure> {
    ExperimentKind::from_name(name)
        .ok_or_else(|| Failure::schema(format!("unknown experiment \"{name}\"; known: {}", known_names())))
}

fn parse_leaf(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path = value` in a TOML tree, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::schema(format!("--set {assignment}: expected path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::schema(format!("--set {assignment}: empty key in path")));
    }
    let (leaf, parents) = keys.split_last().expect("split yields one key");
    let mut table = doc;
    for (depth, key) in parents.iter().enumerate() {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::schema(format!("{}: not a table", keys[..=depth].join("."))))?;
    }
    table.insert(leaf.to_string(), parse_leaf(raw.trim()));
    Ok(())
}

impl RunFile {
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunFile, Failure> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Failure::schema(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let file: RunFile = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::schema(format!("config: {}", e.message())))?;
        file.plan()?;
        Ok(file)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunFile, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::schema(format!("config {}: {e}", path.display())))?;
        RunFile::parse(&text, overrides)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run files serialize")
    }

    /// Resolved experiments in run order. Errors name the offending field.
    pub fn plan(&self) -> Result<Vec<Planned>, Failure> {
        let names: Vec<String> = match &self.run.experiments {
            Some(list) => list.clone(),
            None => self.experiment.keys().cloned().collect(),
        };
        if names.is_empty() {
            return Err(Failure::schema("run.experiments: no experiment selected"));
        }
        for name in self.experiment.keys() {
            parse_kind(name).map_err(|f| f.prefixed(&format!("experiment.{name}")))?;
        }
        if let Some(dup) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
            return Err(Failure::schema(format!("run.experiments: \"{}\" listed twice", dup.1)));
        }
        if self.run.workers == Some(0) {
            return Err(Failure::schema("run.workers: must be positive"));
        }
        names
            .iter()
            .map(|name| {
                let kind = parse_kind(name).map_err(|f| f.prefixed("run.experiments"))?;
                let mut table = match toml::Value::try_from(kind.defaults()) {
                    Ok(toml::Value::Table(t)) => t,
                    _ => unreachable!("experiment defaults serialize to a table"),
                };
                if let Some(user) = self.experiment.get(name) {
                    for (k, v) in user {
                        table.insert(k.clone(), v.clone());
                    }
                }
                let config: ExperimentConfig = toml::Value::Table(table)
                    .try_into()
                    .map_err(|e: toml::de::Error| Failure::schema(format!("experiment.{name}: {}", e.message())))?;
                config
                    .validate()
                    .map_err(|e| Failure::from_lib(e).prefixed(&format!("experiment.{name}")))?;
                Ok(Planned { kind, config })
            })
            .collect()
    }

    /// Output directory: flag, then environment, then the run file.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        PathBuf::from(self.run.output_dir.as_deref().unwrap_or(DEFAULT_OUTPUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[run]
seed = 3
experiments = ["monte_carlo_rate"]

[experiment.monte_carlo_rate]
seeds = 5
n_list = [10, 40]
"#;

    #[test]
    fn defaults_fill_missing_fields() {
        let f = RunFile::parse(SAMPLE, &[]).unwrap();
        let plan = f.plan().unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].config.seeds, 5);
        assert_eq!(plan[0].config.res, ExperimentKind::MonteCarloRate.defaults().res);
    }

    #[test]
    fn round_trip_is_identity() {
        let f = RunFile::parse(SAMPLE, &["experiment.monte_carlo_rate.delta=0.2".into()]).unwrap();
        let again = RunFile::parse(&f.to_toml(), &[]).unwrap();
        assert_eq!(f, again);
        assert_eq!(again.to_toml(), f.to_toml());
    }

    #[test]
    fn overrides_reach_leaves() {
        let f = RunFile::parse(SAMPLE, &["run.seed=9".into(), "experiment.monte_carlo_rate.t_grid=[1.0, 2.0]".into()]).unwrap();
        assert_eq!(f.run.seed, 9);
        assert_eq!(f.plan().unwrap()[0].config.t_grid, vec![1.0, 2.0]);
    }

    #[test]
    fn bad_delta_names_the_field() {
        let e = RunFile::parse(SAMPLE, &["experiment.monte_carlo_rate.delta=1.5".into()]).unwrap_err();
        assert_eq!(e.code, crate::exit::SCHEMA);
        assert!(e.message.contains("experiment.monte_carlo_rate.delta"), "{}", e.message);
    }

    #[test]
    fn unknown_fields_and_names_are_rejected() {
        let e = RunFile::parse(SAMPLE, &["experiment.monte_carlo_rate.sedes=3".into()]).unwrap_err();
        assert!(e.message.contains("sedes"), "{}", e.message);
        let e = RunFile::parse(SAMPLE, &["run.experiments=[\"foo\"]".into()]).unwrap_err();
        assert!(e.message.contains("foo"), "{}", e.message);
        assert!(RunFile::parse("[run]\n", &[]).is_err());
    }
}
