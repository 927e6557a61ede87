use std::path::Path;
use std::process::{Command, Output};

fn spiked(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiked"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--workers", "2"])
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "lambda_grid = [1.0]\n[noise]\nkind = \"cubic\"\n",
    );
    let out = spiked(&["replica-curve"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.toml:3"), "{err}");
}

#[test]
fn missing_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = spiked(
        &["replica-curve"],
        &dir.path().join("absent.toml"),
        &dir.path().join("out"),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn replica_curve_writes_curve_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lambda_grid = [0.0, 1.0, 2.0]\n[noise]\nkind = \"semicircle\"\n[prior]\nkind = \"gaussian\"\n");
    let out_dir = dir.path().join("out");
    let out = spiked(&["replica-curve"], &cfg, &out_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let curve = std::fs::read_to_string(out_dir.join("phase_curve.csv")).unwrap();
    assert!(curve.starts_with("# manifest_sha256="));
    assert_eq!(curve.lines().count(), 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    let hash = manifest["manifest_sha256"].as_str().unwrap();
    assert!(curve.lines().next().unwrap().ends_with(hash));
}

#[test]
fn oamp_check_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "lambda_grid = [2.0]\n[noise]\nkind = \"quartic\"\n",
    );
    let out_dir = dir.path().join("out");
    let out = spiked(&["oamp-check"], &cfg, &out_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(out_dir.join("oamp_check.json")).unwrap();
    assert!(report.contains("sup_gap_phi"));
}
