use std::path::Path;

use chrono::NaiveDate;

use rtc_core::archive::rt_day_dir;
use rtc_core::pipeline::{range_exit_code, run_day, run_range, PipelineConfig};
use rtc_core::replay::{generate, ReplayConfig};
use rtc_core::writer::{bundle_path, read_bundle, report_path};

fn d(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 7, day).unwrap()
}

fn small(date: NaiveDate) -> ReplayConfig {
    ReplayConfig { service_date: date, routes: 2, stops_per_route: 8, trips: 10, ..ReplayConfig::default() }
}

fn config(archive: &Path, work: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::new(archive, work);
    c.worker_count = 2;
    c
}

#[test]
fn range_reports_each_day_and_continues_past_a_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    generate(&small(d(8)), &archive).unwrap();
    generate(&small(d(10)), &archive).unwrap();
    let cfg = config(&archive, &tmp.path().join("work"));

    let statuses = run_range(&cfg, d(8), d(10));
    let codes: Vec<i32> = statuses.iter().map(|s| s.exit_code).collect();
    assert_eq!(codes, vec![0, 2, 0]);
    assert_eq!(range_exit_code(&statuses), 2);
    assert!(bundle_path(&cfg.work_root, d(8)).exists());
    assert!(!bundle_path(&cfg.work_root, d(9)).exists());
    assert!(report_path(&cfg.work_root, d(10)).exists());
}

#[test]
fn corrupt_snapshots_are_counted_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    let out = generate(&ReplayConfig { corrupt_share: 0.3, ..small(d(8)) }, &archive).unwrap();
    assert!(out.corrupt_snapshots > 0);
    let cfg = config(&archive, &tmp.path().join("work"));
    let day = run_day(&cfg, d(8)).unwrap();
    assert_eq!(day.report.ingest.parse_failures, out.corrupt_snapshots as u64);
    assert_eq!(day.report.ingest.snapshots_read, out.snapshots as u64);
    assert!(day.report.output.trips > 0);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    generate(&small(d(8)), &archive).unwrap();
    let cfg = config(&archive, &tmp.path().join("work"));
    let first = run_day(&cfg, d(8)).unwrap();
    let bundle = std::fs::read(&first.bundle_path).unwrap();
    let report = std::fs::read(&first.report_path).unwrap();
    let second = run_day(&PipelineConfig { worker_count: 1, ..cfg }, d(8)).unwrap();
    assert_eq!(std::fs::read(&second.bundle_path).unwrap(), bundle);
    assert_eq!(std::fs::read(&second.report_path).unwrap(), report);
}

#[test]
fn day_without_positions_yields_an_empty_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    generate(&small(d(8)), &archive).unwrap();
    let dir = rt_day_dir(&archive, d(8));
    for e in std::fs::read_dir(&dir).unwrap() {
        std::fs::remove_file(e.unwrap().path()).unwrap();
    }
    let cfg = config(&archive, &tmp.path().join("work"));
    let day = run_day(&cfg, d(8)).unwrap();
    assert_eq!(day.report.output.trips, 0);
    assert_eq!(day.report.ratios.resolution_rate, None);
    let read = read_bundle(&day.bundle_path).unwrap();
    assert!(read.timetable.trips_by_id.is_empty());
}

#[test]
fn missing_timetable_is_reported_as_missing_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    generate(&small(d(8)), &archive).unwrap();
    std::fs::remove_file(rtc_core::archive::timetable_path(&archive, d(8))).unwrap();
    let cfg = config(&archive, &tmp.path().join("work"));
    assert_eq!(run_day(&cfg, d(8)).unwrap_err().exit_code(), 2);
}
