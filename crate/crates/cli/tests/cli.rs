use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn evector(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evector")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn out_dir(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn l1_run_writes_outputs_and_reports_packets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evector(&["run", &scenario("broken_wire_l1.scn"), "--out", out_dir(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("telemetry.jsonl").exists());
    assert!(tmp.path().join("packets_cable-EVSE1.csv").exists());

    let rep = evector(&["report", out_dir(tmp.path()), "--kind", "packets"]);
    assert_eq!(rep.status.code(), Some(0));
    let text = String::from_utf8(rep.stdout).unwrap();
    assert!(text.starts_with("t,sent,delivered,retransmitted,errored\n"));
    assert_eq!(text, fs::read_to_string(tmp.path().join("packets_cable-EVSE1.csv")).unwrap());

    let bad = evector(&["report", out_dir(tmp.path()), "--kind", "packets", "--link", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
    let fuzz = evector(&["report", out_dir(tmp.path()), "--kind", "fuzz"]);
    assert_eq!(fuzz.status.code(), Some(2));
}

#[test]
fn fuzz_report_matches_written_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evector(&["run", &scenario("fuzz_random.scn"), "--out", out_dir(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let rep = evector(&["report", out_dir(tmp.path()), "--kind", "fuzz"]);
    assert_eq!(rep.status.code(), Some(0));
    assert_eq!(
        String::from_utf8(rep.stdout).unwrap(),
        fs::read_to_string(tmp.path().join("fuzz.csv")).unwrap()
    );
}

#[test]
fn seed_override_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = evector(&["run", &scenario("normal_charge.scn"), "--seed", "7", "--out", out_dir(dir.path())]);
        assert!(matches!(out.status.code(), Some(0 | 1)));
    }
    assert_eq!(
        fs::read(a.path().join("telemetry.jsonl")).unwrap(),
        fs::read(b.path().join("telemetry.jsonl")).unwrap()
    );
}

#[test]
fn invalid_scenario_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.scn");
    fs::write(&path, r#"{"seed": 1, "schedule_end_s": -5, "evses": [], "evs": []}"#).unwrap();
    let out = evector(&["run", path.to_str().unwrap(), "--out", out_dir(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let missing = evector(&["run", "/definitely/not/here.scn"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn mock_driver_runs_l1_without_link_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evector(&["run", &scenario("broken_wire_l1.scn"), "--driver", "mock", "--out", out_dir(tmp.path())]);
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = evector(&["report", out_dir(tmp.path()), "--kind", "packets"]);
    assert_eq!(rep.status.code(), Some(2));
}
