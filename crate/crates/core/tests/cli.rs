use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn exitrate() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exitrate"))
}

/// Small 1-D configuration that every subcommand finishes quickly on.
const SMALL: &str = r#"{
  "system": { "A": [[0.5]], "B": [[[1.0]]] },
  "feedback_candidates": [ [[[-2.0]]], [[[-1.0]]] ],
  "domain": { "box": { "lower": [-1.0], "upper": [1.0] } },
  "diffusion": { "base": [[1.0]], "modulation": { "kind": "constant" } },
  "controls": [ { "lower": [-0.5], "upper": [0.5] } ],
  "epsilon": [0.5, 0.4, 0.3],
  "run": { "grid": [101], "samples": 400, "t_max": 40, "weights": [[1.0]], "invariance_grid": [21] }
}"#;

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn every_subcommand_writes_manifested_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    for (command, expected) in [
        ("simulate", vec!["exit_times_0.csv", "survival_0.csv", "simulate.json"]),
        ("eig", vec!["psi_0.csv", "eig.json"]),
        ("hjb", vec!["policy_0_ch1.csv", "psi_0_ch1.csv", "hjb.json"]),
        ("action", vec!["action.csv", "path.csv", "action.json", "selection.json"]),
        ("asymptotics", vec!["asymptotics.csv", "asymptotics.json"]),
        ("pareto", vec!["records.csv", "front.csv", "scalarization.csv", "pareto.json"]),
    ] {
        let out = dir.path().join(command);
        let status = exitrate()
            .args([command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"])
            .status()
            .unwrap();
        assert!(status.success(), "{command} failed");
        let manifest = read_json(&out.join("manifest.json"));
        assert_eq!(manifest["partial"], Value::Bool(false));
        assert_eq!(manifest["seed"], 3);
        let names: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
        for name in expected {
            assert!(names.contains(&name), "{command}: {name} missing from {names:?}");
            assert!(out.join(name).is_file());
        }
    }
}

#[test]
fn simulate_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}"));
        let status = exitrate()
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads])
            .args(["--epsilon", "0.5"])
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out.join("exit_times_0.csv")).unwrap()
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"system\": ").unwrap();
    let output = exitrate().args(["eig", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!output.status.success());
    let err: Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(err["kind"], "config");

    let output = exitrate().arg("solve").output().unwrap();
    assert!(!output.status.success());
    let err: Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(err["kind"], "usage");

    let output = exitrate().arg("eig").output().unwrap();
    let err: Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(err["kind"], "usage");
}
