#![cfg(not(feature = "fault-inject-simplex"))]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SMOKE: &str = r#"
[run]
seed = 7
experiments = ["generalization_gap"]

[experiment.generalization_gap]
res = 32
m_kernel = 512
n_list = [50]
seeds = 1
t_grid = [1.0, 2.0]
"#;

fn adlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("ADLAB_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn smoke_run_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let start = Instant::now();
    let o = adlab(&["run", &cfg, "--out", "out"], dir.path());
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("out/generalization_gap.csv")).unwrap();
    assert!(csv.starts_with("# experiment: generalization_gap"));
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 1 + 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["root_seed"], 7);
    assert_eq!(manifest["passed"], true);
    assert_eq!(manifest["experiments"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_delta_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let o = adlab(&["run", &cfg, "--set", "experiment.generalization_gap.delta=1.5", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("delta"), "{}", text(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn resource_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let o = adlab(
        &[
            "run",
            &cfg,
            "--set",
            "experiment.generalization_gap.dim=3",
            "--set",
            "experiment.generalization_gap.res=128",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(!dir.path().join("out/generalization_gap.csv").exists());
}

#[test]
fn row_count_follows_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let o = adlab(
        &[
            "run",
            &cfg,
            "--set",
            "experiment.generalization_gap.seeds=3",
            "--set",
            "experiment.generalization_gap.n_list=[20, 80]",
            "--set",
            "experiment.generalization_gap.t_grid=[0.5, 1.0, 2.0]",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("out/generalization_gap.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2 * 3);
}

#[test]
fn identical_csvs_for_any_worker_count_and_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let a = adlab(&["--workers", "1", "run", &cfg, "--out", "a"], dir.path());
    let b = adlab(&["--workers", "3", "run", &cfg, "--out", "b"], dir.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let ca = fs::read(dir.path().join("a/generalization_gap.csv")).unwrap();
    let cb = fs::read(dir.path().join("b/generalization_gap.csv")).unwrap();
    assert_eq!(ca, cb);
    let r = adlab(&["run", "--replay", "a/manifest.json", "--out", "c"], dir.path());
    assert_eq!(r.status.code(), Some(0), "{}", text(&r));
    assert!(text(&r).contains("same generalization_gap"));
}

#[test]
fn environment_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let o = Command::new(env!("CARGO_BIN_EXE_adlab"))
        .args(["run", &cfg])
        .current_dir(dir.path())
        .env("ADLAB_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(dir.path().join("from_env/manifest.json").exists());
}

#[test]
fn describe_prints_anchor_and_rejects_unknown_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = adlab(&["describe", "generalization_gap"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = text(&o);
    assert!(out.contains("Generalization-gap proposition"));
    assert!(out.contains("sqrt(d) (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) t / sqrt(n)"));
    assert!(out.contains("delta"));
    let o = adlab(&["describe", "slow_deterioration"], dir.path());
    assert!(text(&o).contains("Slow-deterioration proposition") && text(&o).contains("cap 1024"));
    let o = adlab(&["describe", "foo"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("monte_carlo_rate"));
}

#[test]
fn selftest_passes_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = adlab(&["selftest"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", text(&a));
    let lines: Vec<&str> = std::str::from_utf8(&a.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.contains(": PASS")));
    let b = adlab(&["selftest"], dir.path());
    assert_eq!(a.stdout, b.stdout);
}
