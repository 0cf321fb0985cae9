use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use tesopt_cli::results::{read_results, RecordStatus};

const SMALL: &str = r#"{
  "field_points": 200,
  "lattices": {
    "l1l1": {"alpha_db_min": -100, "alpha_db_max": -85, "weight_db_min": -10, "weight_db_max": 5, "step_db": 15},
    "l1l2": {"alpha_db_min": -100, "alpha_db_max": -85, "weight_db_min": -10, "weight_db_max": 5, "step_db": 15},
    "tls": {"alpha_db_min": -150, "alpha_db_max": -135, "weight_db_min": -10, "weight_db_max": 5, "step_db": 15}
  }
}"#;

fn tesopt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tesopt"))
        .args(args)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(dir.join("config.json"))
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Mesh and lead field of the small config, built once.
fn prepared() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("config.json"), SMALL).unwrap();
        for cmd in ["mesh", "leadfield"] {
            let o = tesopt(&[cmd], dir.path());
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        dir
    })
}

/// Fresh working directory holding copies of the prepared artifacts.
fn workspace(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("config.json"), config).unwrap();
    let src = prepared().path().join("out");
    let dst = dir.path().join("out");
    fs::create_dir_all(&dst).unwrap();
    for entry in fs::read_dir(&src).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), dst.join(entry.file_name())).unwrap();
        }
    }
    dir
}

fn out(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join("out").join(name)
}

#[test]
fn search_then_report() {
    let dir = workspace(SMALL);
    let o = tesopt(&["search"], dir.path());
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 2, "{}", stderr(&o));
    let results = read_results(&out(&dir, "results.json")).unwrap();
    assert_eq!(results.records.len(), 3 * 2 * 2);
    assert_eq!(code == 0, results.records.iter().all(|r| r.status == RecordStatus::Ok));
    assert!(out(&dir, "timings.json").exists());
    assert!(out(&dir, "lattices").join("tls_run1.csv").exists());

    let o = tesopt(&["report"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out(&dir, "report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("Method"), "{text}");
}

#[test]
fn results_are_reproducible() {
    let a = workspace(SMALL);
    let b = workspace(SMALL);
    let flags = ["--method", "tls,l1l2", "search"];
    tesopt(&flags, a.path());
    tesopt(&flags, b.path());
    let ra = fs::read(out(&a, "results.json")).unwrap();
    let rb = fs::read(out(&b, "results.json")).unwrap();
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
}

#[test]
fn unreachable_threshold_exits_two() {
    let config = SMALL.replacen('{', r#"{"threshold": 1e9,"#, 1);
    let dir = workspace(&config);
    let o = tesopt(&["--method", "tls", "--case", "A", "--channels", "8", "search"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let results = read_results(&out(&dir, "results.json")).unwrap();
    assert_eq!(results.records.len(), 1);
    assert_eq!(results.records[0].status, RecordStatus::NoFeasibleCandidate);
}

#[test]
fn optimize_writes_one_record() {
    let dir = workspace(SMALL);
    let o = tesopt(&["--method", "tls", "optimize", "--alpha-db", "-140", "--weight-db", "-5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out(&dir, "optimize_tls.json")).unwrap()).unwrap();
    let y = doc["y_ma"].as_array().unwrap();
    assert_eq!(y.len(), 32);
    let sum: f64 = y.iter().map(|v| v.as_f64().unwrap()).sum();
    assert!(sum.abs() < 1e-9, "{sum}");
}

#[test]
fn corrupted_sidecar_is_rejected() {
    let dir = workspace(SMALL);
    let path = out(&dir, "leadfield.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    doc["rows"] = serde_json::json!(17);
    fs::write(&path, doc.to_string()).unwrap();
    let o = tesopt(&["--method", "tls", "search"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rows"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_an_error() {
    let dir = workspace(r#"{"electrode": 8}"#);
    let o = tesopt(&["search"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("electrode"), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("config.json"), SMALL).unwrap();
    let o = tesopt(&["leadfield"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mesh.json"), "{}", stderr(&o));
}
