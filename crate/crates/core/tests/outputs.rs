use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use strainsim::scenarios::{self, ScenarioMetrics, ScenarioSpec};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strainsim"))
}

#[test]
fn csv_metrics_round_trip() {
    let spec = ScenarioSpec::load(&configs().join("short.toml")).unwrap();
    let run = scenarios::run_scenario(&spec, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scenarios::write_outputs(&run, dir.path()).unwrap();
    for seg in &run.metrics.segments {
        let text = fs::read_to_string(dir.path().join(&seg.file)).unwrap();
        let again = scenarios::metrics_from_csv(&text, &run.metrics.bands).unwrap();
        assert_eq!(again, seg.metrics, "{}", seg.file);
    }
    let json = fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let parsed: ScenarioMetrics = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, run.metrics);
}

#[test]
fn csv_columns_in_fixed_order() {
    let spec = ScenarioSpec::load(&configs().join("short.toml")).unwrap();
    let run = scenarios::run_scenario(&spec, None).unwrap();
    let seg = &run.metrics.segments[0];
    let text = scenarios::trajectory_csv(seg, &run.results[0]);
    let table = scenarios::read_trajectory_csv(&text, "short").unwrap();
    let n = run.results[0].log.rows[0].q.len();
    let mut want = vec!["t".to_string()];
    want.extend((0..n).map(|i| format!("q{i}")));
    want.extend((0..n).map(|i| format!("qdot{i}")));
    want.extend((0..2).map(|i| format!("theta_a{i}")));
    want.extend((0..2).map(|i| format!("L_c{i}")));
    want.extend((0..2).map(|i| format!("u{i}")));
    want.extend((0..2).map(|i| format!("x{i}")));
    want.push("energy_kinetic".into());
    want.push("energy_elastic".into());
    assert_eq!(table.columns, want);
}

#[test]
fn unknown_key_exits_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "name = \"bad\"\nkind = \"custom\"\nwindows = 3\n").unwrap();
    let out = cli().arg("run").arg(&spec).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("windows") && err.contains("line 3"), "{err}");
}

#[test]
fn workspace_cloud_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .arg("workspace")
        .arg(configs().join("short.toml"))
        .args(["--samples", "6", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("workspace.csv")).unwrap();
    let solved: usize = String::from_utf8_lossy(&out.stdout).split_whitespace().next().unwrap().parse().unwrap();
    assert!(solved > 0);
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, solved + 1);
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .arg("run")
        .arg(configs().join("short.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--sweep", "sim.seed=1,2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["sim.seed=1", "sim.seed=2"] {
        assert!(dir.path().join(v).join("metrics.json").is_file(), "{v}");
    }
}
