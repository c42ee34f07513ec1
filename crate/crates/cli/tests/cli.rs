use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dope_core::config::ScenarioFile;
use dope_core::harness::{read_metrics, ScenarioConfig, METRICS_FILE, PREVALENCE_FILE, TRADEOFF_FILE};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn dope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dope")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dope(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn shipped_scenarios_are_valid() {
    for name in ["quick.toml", "desk.toml", "full-scale.toml"] {
        let file = ScenarioFile::read(&scenario(name)).unwrap();
        ScenarioConfig::from_file(&file).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let desk = ScenarioConfig::from_file(&ScenarioFile::read(&scenario("desk.toml")).unwrap()).unwrap();
    assert_eq!(desk.digest(), ScenarioConfig::desk_default().digest());
}

#[test]
fn simulate_then_select_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = scenario("quick.toml");
    let table = ok(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4", "--workers", "1"]);
    for f in [METRICS_FILE, TRADEOFF_FILE, PREVALENCE_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rows = read_metrics(&out.join(METRICS_FILE)).unwrap();
    // Four intervals plus three baselines.
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.seed == 4));
    assert_eq!(table.lines().count(), rows.len() + 1);

    let again = dir.path().join("again");
    ok(&["simulate", "--config", config.to_str().unwrap(), "--out", again.to_str().unwrap(), "--seed", "4", "--workers", "1"]);
    assert_eq!(std::fs::read(out.join(METRICS_FILE)).unwrap(), std::fs::read(again.join(METRICS_FILE)).unwrap());

    let chosen = ok(&["select-interval", "--tables", out.to_str().unwrap(), "--target", "1.01"]);
    assert!(chosen.trim().starts_with('['), "{chosen}");
    let infeasible = dope(&["select-interval", "--tables", out.join(METRICS_FILE).to_str().unwrap(), "--target", "0"]);
    assert!(!infeasible.status.success());

    let text = ok(&["report", "--tables", out.to_str().unwrap()]);
    let json = ok(&["report", "--tables", out.to_str().unwrap(), "--json"]);
    assert_eq!(text.lines().count(), json.lines().count());
    for line in json.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["dominant"].is_string() && v["dominated"].is_string());
    }
}

#[test]
fn sweep_covers_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", scenario("quick.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--samples", "500"]);
    let rows = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 2 * 7);
    let mut points: Vec<(f64, f64)> = rows.iter().map(|r| (r.p_primary, r.p_secondary)).collect();
    points.dedup();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    assert_eq!(points, [(0.05, 0.2), (0.4, 0.2)]);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dope(&["simulate", "--config", "/nonexistent.toml", "--out", out]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("dope: "));

    let zero = dope(&["simulate", "--config", scenario("quick.toml").to_str().unwrap(), "--out", out, "--workers", "0"]);
    assert!(!zero.status.success());
    assert!(String::from_utf8_lossy(&zero.stderr).contains("workers"));

    let no_sweep = dir.path().join("plain.toml");
    let text = std::fs::read_to_string(scenario("quick.toml")).unwrap();
    std::fs::write(&no_sweep, &text[..text.find("[sweep]").unwrap()]).unwrap();
    let out = dope(&["sweep", "--config", no_sweep.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep"));
    assert!(!out.status.success());

    assert!(!dope(&["simulate"]).status.success());
}
