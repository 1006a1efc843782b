use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hapsy(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hapsy")).current_dir(cwd).args(args).output().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn simulate_is_byte_identical_and_stays_in_out() {
    let cwd = tempfile::tempdir().unwrap();
    let a = hapsy(cwd.path(), &["--mode", "simulate", "--reps", "2", "--seed", "7", "--out", "a"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = hapsy(cwd.path(), &["--mode", "simulate", "--reps", "2", "--seed", "7", "--out", "b"]);
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let (ta, tb) = (tree(&cwd.path().join("a")), tree(&cwd.path().join("b")));
    assert_eq!(ta, tb);
    assert!(ta.contains_key("summary.json") && ta.contains_key("runs.csv"));
    for name in [
        "summary.json",
        "one_site_trace.csv",
        "two_site_trace.csv",
        "placements.csv",
        "trace.svg",
        "strip.svg",
        "session.ndjson",
    ] {
        assert!(ta.contains_key(&format!("runs/0001/{name}")), "{name}");
    }
    // Nothing written outside the output directories.
    let top: Vec<String> =
        fs::read_dir(cwd.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(top.len(), 2, "{top:?}");
    // Rerunning into the same directory overwrites identically.
    hapsy(cwd.path(), &["--mode", "simulate", "--reps", "2", "--seed", "7", "--out", "a"]);
    assert_eq!(tree(&cwd.path().join("a")), tb);

    let stdout = String::from_utf8(a.stdout).unwrap();
    let summary: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(summary["aggregate"]["reps"], 2);
    assert!(stdout.contains("two-site < one-site"));
}

#[test]
fn zero_reps_fails() {
    let cwd = tempfile::tempdir().unwrap();
    let o = hapsy(cwd.path(), &["--mode", "simulate", "--reps", "0", "--out", "o"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("repetitions"));
    assert!(!cwd.path().join("o").exists());
}

#[test]
fn invalid_config_fails_with_field() {
    let cwd = tempfile::tempdir().unwrap();
    fs::write(cwd.path().join("bad.toml"), "[staircase]\nstep_ratio_down_over_up = 0.0\n").unwrap();
    let o = hapsy(cwd.path(), &["--mode", "simulate", "--config", "bad.toml", "--out", "o"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("staircase.step_ratio_down_over_up"));
    fs::write(cwd.path().join("typo.toml"), "[staircase]\nstep_ratio = 0.5\n").unwrap();
    let o = hapsy(cwd.path(), &["--mode", "simulate", "--config", "typo.toml", "--out", "o"]);
    assert!(!o.status.success());
}

#[test]
fn sweep_writes_a_row_per_cell() {
    let cwd = tempfile::tempdir().unwrap();
    let o = hapsy(
        cwd.path(),
        &["--mode", "sweep", "--reps", "10", "--grid", "ratio=1.0,0.7393;exponent=1,max", "--out", "s"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(cwd.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let one = hapsy(cwd.path(), &["--mode", "sweep", "--reps", "4", "--grid", "ratio=1.0", "--out", "t"]);
    assert!(one.status.success());
    assert_eq!(fs::read_to_string(cwd.path().join("t/sweep.csv")).unwrap().lines().count(), 2);
}

#[test]
fn empty_grid_fails() {
    let cwd = tempfile::tempdir().unwrap();
    for grid in ["", "ratio="] {
        let o = hapsy(cwd.path(), &["--mode", "sweep", "--grid", grid, "--out", "s"]);
        assert!(!o.status.success(), "{grid:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("grid"));
    }
    let o = hapsy(cwd.path(), &["--mode", "sweep", "--out", "s"]);
    assert!(!o.status.success());
}

#[test]
fn replay_verifies_and_rejects_tampering() {
    let cwd = tempfile::tempdir().unwrap();
    assert!(hapsy(cwd.path(), &["--mode", "simulate", "--seed", "3", "--out", "sim"]).status.success());
    let log = cwd.path().join("sim/runs/0000/session.ndjson");
    let o = hapsy(cwd.path(), &["--mode", "replay", "--log", log.to_str().unwrap(), "--out", "re"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay       ok"));
    for name in ["one_site_trace.csv", "placements.csv", "trace.svg"] {
        assert_eq!(
            fs::read(cwd.path().join("re").join(name)).unwrap(),
            fs::read(cwd.path().join("sim/runs/0000").join(name)).unwrap()
        );
    }

    let text = fs::read_to_string(&log).unwrap();
    let tampered = text.replacen("\"judgment\":\"FIRST_GREATER\"", "\"judgment\":\"EQUAL\"", 1);
    fs::write(cwd.path().join("bad.ndjson"), tampered).unwrap();
    let o = hapsy(cwd.path(), &["--mode", "replay", "--log", "bad.ndjson"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("last valid byte offset"));
}
