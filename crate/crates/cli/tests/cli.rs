use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fsod_core::pipeline::ExperimentConfig;

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn setup() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = ExperimentConfig::smoke();
    cfg.output_dir = out.clone();
    let config = tmp.path().join("smoke.toml");
    std::fs::write(&config, cfg.to_toml_string()).unwrap();
    Run { _tmp: tmp, config, out }
}

fn fsod(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsod"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("FSOD_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn smoke_pipeline_completes_quickly() {
    let r = setup();
    let start = Instant::now();
    for cmd in ["gen-data", "train-base", "train-pcf", "train-novel", "build-prototypes", "evaluate"] {
        let stdout = ok(fsod(&[cmd], &r.config));
        assert!(stdout.contains("created"), "{cmd}: {stdout}");
    }
    ok(fsod(&["report"], &r.config));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "smoke pipeline took {secs:.1}s");
    assert!(r.out.join("report.md").exists());
    assert!(r.out.join("manifest.json").exists());

    // rerunning a finished step is a no-op
    let again = ok(fsod(&["train-base"], &r.config));
    assert!(again.lines().all(|l| l.starts_with("skipped")), "{again}");
    let forced = ok(fsod(&["train-base", "--force"], &r.config));
    assert!(forced.starts_with("created"));
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (setup(), setup());
    ok(fsod(&["gen-data", "--seed", "3"], &a.config));
    ok(fsod(&["gen-data", "--seed", "3"], &b.config));
    let (ta, tb) = (tree(&a.out.join("seed-3/data")), tree(&b.out.join("seed-3/data")));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn evaluate_without_checkpoint_names_prerequisite() {
    let r = setup();
    ok(fsod(&["gen-data"], &r.config));
    let out = fsod(&["evaluate", "--k", "1"], &r.config);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"], "missing-artifact");
    assert!(v["requires"].as_str().unwrap().starts_with("fsod train-"), "{line}");
}

#[test]
fn invalid_config_reports_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "shots = [1, 7]\n").unwrap();
    let out = fsod(&["gen-data"], &config);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert_eq!(v["field"], "shots[1]");
}

#[test]
fn output_env_overrides_config() {
    let r = setup();
    let elsewhere = r.out.with_file_name("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_fsod"))
        .args(["gen-data", "--config"])
        .arg(&r.config)
        .env("FSOD_OUT", &elsewhere)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(out);
    assert!(elsewhere.join("seed-0/data").exists());
    assert!(!r.out.exists());
}

#[test]
fn report_is_idempotent_and_needs_results() {
    let r = setup();
    let empty = fsod(&["report"], &r.config);
    assert!(!empty.status.success());
    assert!(String::from_utf8_lossy(&empty.stderr).contains("\"empty\""));

    for cmd in ["gen-data", "train-base", "train-pcf", "train-novel", "build-prototypes", "evaluate"] {
        ok(fsod(&[cmd, "--k", "1"], &r.config));
    }
    ok(fsod(&["report"], &r.config));
    let md = std::fs::read(r.out.join("report.md")).unwrap();
    let csv = std::fs::read(r.out.join("shot_curve.csv")).unwrap();
    ok(fsod(&["report"], &r.config));
    assert_eq!(std::fs::read(r.out.join("report.md")).unwrap(), md);
    assert_eq!(std::fs::read(r.out.join("shot_curve.csv")).unwrap(), csv);
}

#[test]
fn ablate_writes_matrix_files() {
    let r = setup();
    let stdout = ok(fsod(&["ablate"], &r.config));
    assert!(stdout.starts_with("row,seed,AP,AP50,AP75"));
    for label in ["baseline", "+PCF", "+ME", "+PCF+ME"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{label},median,"))), "{label}");
    }
    assert!(r.out.join("ablation.json").exists());
    assert!(r.out.join("ablation.csv").exists());
}
