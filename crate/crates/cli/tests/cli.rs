use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semalign_core::harness::RunManifest;

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.json")
}

fn semalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semalign"))
        .args(args)
        .env_remove("SEMALIGN_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pair_twenty_to_ten_doubles() {
    let o = semalign(&["pair", "--lt", "20", "--ls", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').take(2).map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    for r in rows {
        assert_eq!(r[1], 2 * r[0]);
    }
}

#[test]
fn pair_reports_critical_partners() {
    let o = semalign(&["pair", "--lt", "8", "--ls", "4", "--critical", "3,8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("critical teacher layer 3 -> student layer 2"), "{text}");
    assert!(text.contains("critical teacher layer 8 -> student layer 4"), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    let o = semalign(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = semalign(&["pair", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_exits_two() {
    let o = semalign(&["run", "--config", "/nonexistent/semalign.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("semalign.json"), "{}", stderr(&o));
}

#[test]
fn malformed_config_names_the_line() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("bad.json");
    std::fs::write(&path, "{\n  \"teacher\": {\n    \"n_layers\": \"eight\"\n  }\n}\n").unwrap();
    let o = semalign(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn vocab_mismatch_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(example_config()).unwrap()).unwrap();
    cfg["student"]["vocab_size"] = 32.into();
    let path = d.path().join("mismatch.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = d.path().join("run");
    let o = semalign(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists(), "no compute before validation");
}

#[test]
fn run_writes_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let o = semalign(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = RunManifest::load(&d.path().join("manifest.json")).unwrap();
    assert!(m.failed.is_none());
    assert_eq!(m.stages_completed.len(), 9);
    for a in &m.artifacts {
        assert!(d.path().join(&a.path).exists(), "{}", a.path);
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let o = semalign(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--method",
        "none",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = RunManifest::load(&d.path().join("manifest.json")).unwrap();
    assert_eq!(m.seeds["teacher_init"], 11);
    assert_eq!(m.seeds["task"], 211);
    assert_eq!(m.metrics.student_before_acc, m.metrics.student_after_acc);
}

#[test]
fn stagewise_commands_chain() {
    let d = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let base = ["--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()];
    let step = |cmd: &[&str]| {
        let args: Vec<&str> = cmd.iter().chain(base.iter()).copied().collect();
        let o = semalign(&args);
        assert!(o.status.success(), "{cmd:?}: {}", stderr(&o));
        stdout(&o)
    };
    step(&["train-teacher"]);
    step(&["train-student"]);
    step(&["compute-bases"]);
    let v = step(&["validate-semantics"]);
    assert!(v.contains("teacher output:"), "{v}");
    let a = step(&["attribute"]);
    assert!(a.contains("critical teacher layer"), "{a}");
    step(&["transfer"]);
    assert!(d.path().join("student_after.json").exists());
    step(&["baseline", "--method", "seeking"]);
    let e = step(&["evaluate"]);
    let acc: serde_json::Value = serde_json::from_str(e.lines().next().unwrap()).unwrap();
    for k in ["teacher", "student_before", "student_after"] {
        let v = acc[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    let r = step(&["analyze"]);
    assert!(r.contains("cross_after"), "{r}");
    assert!(d.path().join("report/report.json").exists());
}

#[test]
fn commands_needing_checkpoints_explain_what_is_missing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let o = semalign(&[
        "transfer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-teacher"), "{}", stderr(&o));
}
