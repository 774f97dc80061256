use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcache-sim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = sim(&["run", "--profile", "skyreels-fast", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reuse fraction"));
    for f in ["trace.json", "trace.csv", "curves.csv", "report.txt"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let json = std::fs::read_to_string(dir.path().join("out/trace.json")).unwrap();
    let trace = flowcache_core::RunTrace::from_json(&json).unwrap();
    assert!(trace.verify_hash());
    assert_eq!(trace.config.scene.chunks, 2);
}

#[test]
fn print_config_applies_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{ "profile": "magi-slow", "scene": { "seed": 3 }, "kv": { "lambda": 0.2 } }"#,
    )
    .unwrap();
    let o = sim(&["run", "--config", "c.json", "--seed", "8", "--print-config"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["profile"], "magi-slow");
    assert_eq!(v["scene"]["seed"], 8);
    assert_eq!(v["kv"]["lambda"], 0.2);
    assert_eq!(v["policy"]["epsilon"], 0.01);
    assert!(!dir.path().join("flowcache-out").exists());
}

#[test]
fn config_errors_exit_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{ "kv": { "pool_kernel": 4 } }"#).unwrap();
    let o = sim(&["run", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kv.pool_kernel"), "{}", stderr(&o));

    std::fs::write(dir.path().join("typo.json"), r#"{ "scene": { "chunk": 3 } }"#).unwrap();
    assert_eq!(sim(&["run", "--config", "typo.json"], dir.path()).status.code(), Some(2));
    assert_eq!(sim(&["run", "--profile", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(sim(&["run", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(sim(&["sweep", "--axis", "speed"], dir.path()).status.code(), Some(2));
    assert_eq!(sim(&["verify", "--suite", "nope"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_exit_status_follows_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = sim(&["verify", "--suite", "kernels", "--suite", "policy"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count() >= 7);
    // the ideal field with p in {1,2} is not monotone
    let o = sim(&["verify", "--suite", "theorem"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("slack"));
}

#[test]
fn sweep_rows_in_order_with_zero_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flowcache-sim"))
        .args(["sweep", "--profile", "skyreels-fast", "--axis", "epsilon", "--values", "0.15,0,0.1", "--out", "o"])
        .env("FLOWCACHE_SIM_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(std::fs::read_to_string(dir.path().join("o/sweep_epsilon.csv")).unwrap(), text);
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let values: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(values, ["0.15", "0", "0.1"]);
    // zero threshold: no speedup over itself and no error
    assert_eq!((rows[1][3].as_str(), rows[1][2].as_str()), ("1", "0"));

    let bad = Command::new(env!("CARGO_BIN_EXE_flowcache-sim"))
        .args(["sweep", "--axis", "lambda", "--values", "0.1"])
        .env("FLOWCACHE_SIM_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
