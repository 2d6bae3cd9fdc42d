//! End-to-end runs of the `multidefault` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multidefault"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn trivial_price_is_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["price", "--config", config("trivial").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = stdout(&o);
    assert_eq!(rec["y0"], 1.0);
    assert_eq!(rec["se"], 0.0);
    assert_eq!(rec["method"], "explicit");
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(written, rec);
}

#[test]
fn unknown_suite_exits_with_two() {
    let o = run(&["verify", "nonsense", "--config", config("trivial").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(config("trivial")).unwrap().replace("\"paths\": 1000", "\"paths\": 1000, \"colour\": 3");
    std::fs::write(&bad, text).unwrap();
    for args in [vec!["price", "--config", bad.to_str().unwrap()], vec!["price", "--config", "/nonexistent/config.json"], vec!["price"]] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let cfg = config("c4_euler_p2");
    let read = |i: usize, seed: &str, threads: &str| {
        let d = dirs[i].path().to_str().unwrap();
        let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--threads", threads, "--out", d]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dirs[i].path().join("paths.csv")).unwrap()
    };
    let a = read(0, "11", "1");
    let b = read(1, "11", "4");
    let c = read(2, "12", "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(!dirs[0].path().join("paths.csv.tmp").exists());
}

#[test]
fn zero_intensity_never_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("trivial")).unwrap().replacen("\"value\": 1.0", "\"value\": 0.0", 1);
    let cfg = dir.path().join("quiet.json");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "N1").unwrap();
    let mut rows = 0;
    for line in lines {
        assert_eq!(line.split(',').nth(col), Some("0"));
        rows += 1;
    }
    assert_eq!(rows, 1000 * 11);
}

#[test]
fn verify_writes_a_report_and_exits_zero_on_success() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "martingale", "--config", config("c3_martingale_p1").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    assert_eq!(report["passed"], true);
    let names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, vec!["verify_martingale.json".to_string()]);
}

fn edited(name: &str, dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config(name)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn method_mismatch_is_a_config_error() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = edited("c5_contraction_tanh", cfg_dir.path(), |v| v["solver"]["method"] = "explicit".into());
    let o = run(&["price", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn solver_errors_exit_with_three_and_leave_no_output() {
    // A large negative drift pushes Theta^1 above 1: no equivalent pricing measure.
    let cfg_dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = edited("c9_pq", cfg_dir.path(), |v| {
        v["market"]["params"]["defaultable"][0]["mu"] = serde_json::json!({"kind": "const", "value": -1.0});
        v["scenario"]["paths"] = 2000.into();
    });
    let o = run(&["price", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 0);
}
