use std::path::Path;
use std::process::{Command, Output};

fn rtc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn every_subcommand_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        &["--help"][..],
        &["archive", "rt", "--help"],
        &["archive", "timetable", "--help"],
        &["ingest", "--help"],
        &["correct", "--help"],
        &["validate-gtfs", "--help"],
        &["stats", "--help"],
        &["delays", "--help"],
        &["replay-gen", "--help"],
    ] {
        let o = rtc(cmd, tmp.path());
        assert!(o.status.success(), "{cmd:?}");
        assert!(stdout(&o).contains("Usage:"), "{cmd:?}");
    }
}

#[test]
fn replay_then_correct_a_range() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = rtc(
        &["replay-gen", "--out", "arch", "--routes", "2", "--trips", "6", "--delay-base", "90", "--truth", "truth.csv"],
        tmp.path(),
    );
    assert!(gen.status.success());
    assert!(tmp.path().join("truth.csv").exists());

    let o = rtc(&["correct", "--date", "2025-07-08", "--archive", "arch", "--out", "work"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let zip = tmp.path().join("work/corrected/2025-07-08.gtfs.zip");
    assert!(zip.exists());

    let o = rtc(&["correct", "--date", "2025-07-08", "--end-date", "2025-07-09", "--archive", "arch", "--out", "work"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("2025-07-09") && l.contains(" 2 ")), "{table}");

    let o = rtc(&["validate-gtfs", zip.to_str().unwrap()], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("6 trips"));

    let o = rtc(&["delays", "--bundle", zip.to_str().unwrap(), "--archive", "arch"], tmp.path());
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("trip_id,stop_id,stop_sequence,service_date,delay_seconds\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",90")), "{csv}");
}

#[test]
fn exit_codes_for_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rtc(&["correct", "--date", "2025-07-08", "--archive", "none", "--out", "w", "--radius-m", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = rtc(&["correct", "--date", "2025-07-08", "--archive", "none", "--out", "w"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(tmp.path().join("junk.zip"), b"not a zip").unwrap();
    let o = rtc(&["validate-gtfs", "junk.zip"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let o = rtc(&["correct", "--date", "2025-13-01", "--archive", "a", "--out", "w"], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn stats_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("v.csv"), "group_key,value_seconds\nr1,100\nr1,200\nr1,300\n").unwrap();
    let o = rtc(&["stats", "--input", "v.csv"], tmp.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["r1"]["count"], 3);
    assert_eq!(v["r1"]["median"], 200.0);
}
