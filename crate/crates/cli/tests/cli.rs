use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use levy_bsde::solver::closed_form_linear;
use levy_bsde::TimeGrid;
use serde_json::Value;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(config: &Path, out: &Path, task: &str, seed: Option<u64>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_levy-bsde"));
    cmd.arg("--config").arg(config).arg("--out").arg(out).arg("--task").arg(task);
    if let Some(s) = seed {
        cmd.arg("--seed").arg(s.to_string());
    }
    cmd.output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_picard_config(dir: &Path) -> PathBuf {
    let text = r#"{
        "model": {"gamma": 0.1, "sigma": 0.5, "atoms": [{"mark": 0.5, "intensity": 1.0}, {"mark": -0.3, "intensity": 2.0}]},
        "generator": {"family": "subquadratic", "params": {"c": 0.5, "k": 0.3, "eta": 0.2}},
        "terminal": {"family": "tanh", "params": {"amplitude": 1.0, "scale": 1.0}},
        "solver": {"method": "picard", "grid": {"horizon": 1.0, "steps": 10}, "paths": 2000, "max_paths": 50}
    }"#;
    let path = dir.join("picard.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn solve_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&config_path("linear_envelope.json"), tmp.path(), "solve", None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&tmp.path().join("summary.json"));
    let y0 = summary["y0"].as_f64().unwrap();
    let grid = TimeGrid::uniform(1.0, 100).unwrap();
    let exact = closed_form_linear(1.0, |_| 1.0, |_| 0.0, &grid).unwrap()[0];
    assert!((y0 - exact).abs() / exact < 1e-2, "{y0} vs {exact}");
    let csv = fs::read_to_string(tmp.path().join("solution.csv")).unwrap();
    assert!(csv.starts_with("node,t,index,state,quantity,value\n"));
    let manifest = read_json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["task"], "solve");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"][0], "solution.csv");
}

#[test]
fn negative_intensity_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config_path("comparison_jumps.json")).unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, text.replace("\"intensity\": 1.0", "\"intensity\": -1.0")).unwrap();
    let out = run(&bad, &tmp.path().join("out"), "solve", None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.atoms[0].intensity"), "{err}");
}

#[test]
fn unknown_task_and_missing_config_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&config_path("linear_envelope.json"), tmp.path(), "fit", None).status.code(), Some(2));
    assert_eq!(run(&tmp.path().join("none.json"), tmp.path(), "solve", None).status.code(), Some(2));
}

#[test]
fn verify_detects_corrupted_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let solved = tmp.path().join("solved");
    assert_eq!(run(&config_path("linear_envelope.json"), &solved, "solve", None).status.code(), Some(0));

    let config_text = fs::read_to_string(config_path("linear_envelope.json")).unwrap();
    let with_solution = |csv: &Path| {
        let path = tmp.path().join("verify.json");
        let replacement = format!("\"verify\": {{\"slack_c\": 10.0, \"solution\": {:?}}}", csv.to_str().unwrap());
        fs::write(&path, config_text.replace("\"verify\": {\"slack_c\": 10.0}", &replacement)).unwrap();
        path
    };

    let good = solved.join("solution.csv");
    let out = run(&with_solution(&good), &tmp.path().join("v_good"), "verify", None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(&good).unwrap();
    let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
    let row = lines.iter().position(|l| l.starts_with("0,") && l.contains(",Y,")).unwrap();
    let mut cells: Vec<&str> = lines[row].split(',').collect();
    cells[5] = "1.0e3";
    lines[row] = cells.join(",");
    let corrupted = tmp.path().join("corrupted.csv");
    fs::write(&corrupted, lines.join("\n") + "\n").unwrap();
    let out = run(&with_solution(&corrupted), &tmp.path().join("v_bad"), "verify", None);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&tmp.path().join("v_bad").join("verify.json"));
    assert_eq!(report["ok"], false);
    assert!(read_json(&tmp.path().join("v_bad").join("manifest.json"))["status"]
        .as_str()
        .unwrap()
        .contains("y_bound"));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_picard_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        assert_eq!(run(&cfg, dir, "solve", Some(9)).status.code(), Some(0));
    }
    assert_eq!(run(&cfg, &c, "solve", Some(10)).status.code(), Some(0));
    for name in ["solution.csv", "summary.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_ne!(fs::read(a.join("solution.csv")).unwrap(), fs::read(c.join("solution.csv")).unwrap());

    for dir in [&a, &b] {
        assert_eq!(run(&cfg, dir, "simulate", Some(9)).status.code(), Some(0));
    }
    let paths = fs::read(a.join("paths.csv")).unwrap();
    assert_eq!(paths, fs::read(b.join("paths.csv")).unwrap());
    assert_eq!(String::from_utf8(paths).unwrap().lines().count(), 1 + 50 * 11);
}

#[test]
fn malliavin_hlimit_and_pdie_tasks_run() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config_path("comparison_jumps.json")).unwrap().replace("20000", "2000");
    let cfg = tmp.path().join("m.json");
    fs::write(&cfg, text).unwrap();
    let out = run(&cfg, &tmp.path().join("m"), "malliavin", None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(&tmp.path().join("m").join("malliavin.json"));
    assert_eq!(m["directions"].as_array().unwrap().len(), 2);

    let text = fs::read_to_string(config_path("hlimit.json"))
        .unwrap()
        .replace("\"steps\": 200", "\"steps\": 40")
        .replace("\"nodes\": 201", "\"nodes\": 81");
    let cfg = tmp.path().join("h.json");
    fs::write(&cfg, text).unwrap();
    let out = run(&cfg, &tmp.path().join("h"), "hlimit", None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let norms = fs::read_to_string(tmp.path().join("h").join("norms.csv")).unwrap();
    assert!(norms.starts_with("n,m,dY,dZ,dU\n"));

    let text = fs::read_to_string(config_path("pdie.json"))
        .unwrap()
        .replace("\"steps\": 1000", "\"steps\": 200")
        .replace("\"nodes\": 401", "\"nodes\": 101");
    let cfg = tmp.path().join("p.json");
    fs::write(&cfg, text).unwrap();
    let out = run(&cfg, &tmp.path().join("p"), "pdie", None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&tmp.path().join("p").join("summary.json"));
    assert!(s["u0"].as_f64().unwrap().abs() < 1.0);
}

#[test]
fn hlimit_reports_nonconvergence() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config_path("hlimit.json"))
        .unwrap()
        .replace("\"steps\": 200", "\"steps\": 20")
        .replace("\"nodes\": 201", "\"nodes\": 41")
        .replace("\"cauchy_tol\": 1e-4", "\"cauchy_tol\": 1e-4, \"schedule\": [1, 2]");
    let cfg = tmp.path().join("h.json");
    fs::write(&cfg, text).unwrap();
    let out = run(&cfg, &tmp.path().join("h"), "hlimit", None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("h").join("manifest.json").exists());
}
