use std::path::Path;
use std::process::{Command, Output};

fn gleamsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gleamsim"))
        .args(args)
        .env("GLEAMSIM_LOG", "error")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const BCAST: &str = r#"
name = "cli-bcast"
seed = 11
[topology]
kind = "star"
hosts = 4
[workload]
kind = "bcast"
msg_bytes = 65536
"#;

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "s.toml", BCAST);
    let out = dir.path().join("out");
    let o = gleamsim(&["run", "--scenario", &sc, "--seed", "5", "--out", out.to_str().unwrap(), "--trace"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "cli-bcast,5,0,checksum_ok,1"), "{csv}");
    assert!(out.join("metrics.json").exists());
    assert!(out.join("events.jsonl").exists());
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert!(first.get("t").is_some());
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "s.toml", &BCAST.replace("seed = 11", "seed = 11\nloss_rate = 1e-3"));
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("o{i}"));
        assert!(gleamsim(&["run", "--scenario", &sc, "--out", out.to_str().unwrap()]).status.success());
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn sweep_writes_normalized_goodput() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "s.toml", BCAST);
    let out = dir.path().join("sw");
    let o = gleamsim(&["sweep", "--scenario", &sc, "--loss", "0,1e-3", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",normalized_goodput,")).count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", BCAST);
    assert_eq!(gleamsim(&["validate", "--scenario", &good]).status.code(), Some(0));

    let bad = write(dir.path(), "bad.toml", &BCAST.replace("msg_bytes = 65536", "msg_bytes = 0"));
    assert_eq!(gleamsim(&["validate", "--scenario", &bad]).status.code(), Some(2));
    let syntax = write(dir.path(), "syntax.toml", "name = ");
    assert_eq!(gleamsim(&["validate", "--scenario", &syntax]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(gleamsim(&["validate", "--scenario", missing.to_str().unwrap()]).status.code(), Some(2));

    let stuck = write(dir.path(), "stuck.toml", &format!("{BCAST}[sim]\nmax_sim_time_s = 1e-6\n"));
    let out = dir.path().join("o");
    let o = gleamsim(&["run", "--scenario", &stuck, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("deadlock"));
}
