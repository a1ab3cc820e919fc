use std::path::Path;
use std::process::{Command, Output};

use mfgrad_cli::output::without_timings;

const BASE: &str = r#"{
  "schema_version": 1,
  "drift": {"name": "mean_field_ou", "alpha": 1.0, "beta": 0.5, "auto_clip": true},
  "d": 1, "x0": [1.0], "T": 1.0, "M": 20, "N": 2000,
  "estimator": {"methods": ["bel", "fd", "girsanov_check"]},
  "phi": {"name": "coordinate", "index": 0},
  "seed": 3
}"#;

fn mfgrad(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfgrad"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn simulate_writes_flow_moments_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mfgrad(
        tmp.path(),
        BASE,
        &["simulate", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f == "moments.csv"));
    // one CSV per grid time plus the index
    assert_eq!(
        files
            .iter()
            .filter(|f| f.as_str().unwrap().starts_with("flow/"))
            .count(),
        22
    );
    let moments = std::fs::read_to_string(out.join("moments.csv")).unwrap();
    let digest = manifest["config_digest"].as_str().unwrap();
    assert!(moments.starts_with(&format!("# config_digest={digest}")));
    assert_eq!(moments.lines().count(), 2 + 21);
}

#[test]
fn gradient_reports_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mfgrad(
        tmp.path(),
        BASE,
        &["gradient", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "report_bel_phi0_a0.json",
        "report_fd_phi0.json",
        "report_girsanov_phi0.json",
        "comparison.csv",
        "girsanov_check.csv",
        "bel_weight.csv",
        "picard_trace.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report_fd_phi0.json")).unwrap())
            .unwrap();
    assert_eq!(report["method"], "fd");
    assert_eq!(report["n"], 2000);
}

#[test]
fn seed_override_changes_results_and_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    mfgrad(
        tmp.path(),
        BASE,
        &["gradient", "--out", a.to_str().unwrap()],
    );
    mfgrad(
        tmp.path(),
        BASE,
        &["gradient", "--seed", "4", "--out", b.to_str().unwrap()],
    );
    let read = |d: &Path| std::fs::read_to_string(d.join("report_bel_phi0_a0.json")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    mfgrad(
        tmp.path(),
        BASE,
        &["gradient", "--workers", "1", "--out", a.to_str().unwrap()],
    );
    mfgrad(
        tmp.path(),
        BASE,
        &["gradient", "--workers", "4", "--out", b.to_str().unwrap()],
    );
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (
            std::fs::read_to_string(a.join(&name)).unwrap(),
            std::fs::read_to_string(b.join(&name)).unwrap(),
        );
        if name.to_string_lossy().ends_with(".json") {
            assert_eq!(without_timings(&x).unwrap(), without_timings(&y).unwrap());
        } else {
            assert_eq!(x, y, "{name:?}");
        }
    }
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mfgrad(
        tmp.path(),
        &BASE.replace("\"M\": 20", "\"M\": 0"),
        &["simulate", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`M`"));
    let o = mfgrad(
        tmp.path(),
        &BASE.replace("\"seed\"", "\"sed\""),
        &["simulate", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn unbounded_drift_is_refused_by_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mfgrad(
        tmp.path(),
        &BASE.replace(", \"auto_clip\": true", ""),
        &["gradient", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bounded"));
}

#[test]
fn picard_failure_exits_3_and_keeps_the_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let config = BASE.replace(
        "\"methods\": [\"bel\", \"fd\", \"girsanov_check\"]",
        "\"max_iter\": 2, \"tol\": 1e-12",
    );
    let o = mfgrad(
        tmp.path(),
        &config,
        &["simulate", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("picard_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2 + 2);
}

#[test]
fn missing_config_exits_1() {
    let o = Command::new(env!("CARGO_BIN_EXE_mfgrad"))
        .args([
            "simulate",
            "--config",
            "/nonexistent/config.json",
            "--out",
            "/tmp/unused",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn phi_check_flags_non_integrable_observables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let config = BASE.replace(
        r#""phi": {"name": "coordinate", "index": 0}"#,
        r#""phi": [{"name": "coordinate", "index": 0}, {"name": "exp_square", "rate": 1.0}]"#,
    );
    let o = mfgrad(
        tmp.path(),
        &config,
        &["phi-check", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    let checks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("phi_check.json")).unwrap())
            .unwrap();
    assert_eq!(checks[0]["pass"], true);
    assert_eq!(checks[1]["pass"], false);
}

#[test]
fn validate_drift_and_holder_scan_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = mfgrad(
        tmp.path(),
        BASE,
        &["validate-drift", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("validate_drift.json")).unwrap())
            .unwrap();
    assert_eq!(v["passed"], true);
    let out = tmp.path().join("h");
    let config = BASE.replace("\"M\": 20", "\"M\": 64");
    let o = mfgrad(
        tmp.path(),
        &config,
        &["holder-scan", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("holder_fit.json")).unwrap())
            .unwrap();
    assert!(fit["space_exponent"].as_f64().unwrap().is_finite());
}

#[test]
fn shipped_configs_validate() {
    use mfgrad_cli::{Command as Cmd, ExperimentConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cases = [
        ("ou_gradient.json", Cmd::Gradient),
        ("sign_gradient.json", Cmd::Gradient),
        ("ou_simulate.json", Cmd::Simulate),
        ("holder_scan.json", Cmd::HolderScan),
        ("phi_check.json", Cmd::PhiCheck),
    ];
    for (name, command) in cases {
        let c = ExperimentConfig::load(&dir.join(name)).unwrap();
        c.validate(command)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
