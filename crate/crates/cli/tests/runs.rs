use std::path::Path;
use std::process::Command;

use scvamp_cli::output::parse_trace_csv;
use scvamp_cli::{run_to_dir, ExperimentConfig, ExperimentKind};

fn small(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        n: Some(200),
        m: Some(100),
        batch: Some(10),
        iterations: 6,
        ..Default::default()
    }
}

#[test]
fn resolved_config_round_trips_through_toml() {
    for kind in [
        ExperimentKind::LinearBg,
        ExperimentKind::CorrelatedLearned,
        ExperimentKind::LangevinDemo,
    ] {
        let cfg = ExperimentConfig {
            kind,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn unknown_field_is_reported() {
    let err = ExperimentConfig::from_toml("kind = \"linear-bg\"\nbogus = 1\n").unwrap_err();
    assert!(err.message.contains("bogus"), "{err}");
}

#[test]
fn invalid_values_name_their_field() {
    let mut cfg = small(ExperimentKind::LinearBg);
    cfg.damping = 0.0;
    assert_eq!(cfg.resolve().unwrap_err().field, "damping");
    let cfg = ExperimentConfig {
        kind: ExperimentKind::CorrelatedLearned,
        n: Some(201),
        ..Default::default()
    };
    assert_eq!(cfg.resolve().unwrap_err().field, "n");
}

#[test]
fn run_writes_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ExperimentKind::LinearBg).resolve().unwrap();
    let summary = run_to_dir(&cfg, dir.path(), Some(1)).unwrap();
    assert_eq!(summary["config_hash"], cfg.hash());
    for f in ["trace.csv", "plot.py", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let records = parse_trace_csv(&std::fs::read_to_string(dir.path().join("trace.csv")).unwrap()).unwrap();
    assert!(records.len() >= 2 && records.len() <= cfg.iterations + 1);
    assert!(records.iter().skip(1).all(|r| r.mse_actual.unwrap() > 0.0));
}

#[test]
fn exit_run_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ExperimentKind::Exit).resolve().unwrap();
    run_to_dir(&cfg, dir.path(), Some(1)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("exit_curves.csv")).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("curve,")).count(),
        cfg.exit.points
    );
    assert!(text.lines().any(|l| l.starts_with("staircase,")));
}

fn run_binary(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scvamp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SCVAMP_THREADS")
        .output()
        .unwrap()
}

#[test]
fn binary_runs_se_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("se.toml");
    std::fs::write(&cfg_path, "kind = \"se-only\"\nn = 400\nm = 200\n").unwrap();
    let out = run_binary(
        &["se", "--config", cfg_path.to_str().unwrap(), "--threads", "1"],
        &dir.path().join("o"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/trace.csv").exists());
}

#[test]
fn binary_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "damping = 2.0\n").unwrap();
    let out = run_binary(&["run", "--config", cfg_path.to_str().unwrap()], &dir.path().join("o"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("damping"));
}
