use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{NaiveDate, TimeZone, Utc};
use zip::write::SimpleFileOptions;

use rtc_core::archive::{
    collect_timetable_once, run_rt_collector, rt_day_dir, timetable_path, ArchiverConfig, Clock, HttpFetcher,
    SimulatedClock, TimetableOutcome,
};

type Script = Arc<Mutex<VecDeque<(u16, Vec<u8>)>>>;

/// Serves scripted responses in order, then 200 with `fallback`. Records the
/// request targets it saw.
struct Stub {
    url: String,
    script: Script,
    seen: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    fn start(fallback: Vec<u8>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let script: Script = Arc::default();
        let seen: Arc<Mutex<Vec<String>>> = Arc::default();
        let (s, r) = (script.clone(), seen.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                r.lock().unwrap().push(line.split_whitespace().nth(1).unwrap_or("").to_string());
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                        break;
                    }
                }
                let (status, body) = s.lock().unwrap().pop_front().unwrap_or((200, fallback.clone()));
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        Self { url, script, seen }
    }

    fn push(&self, status: u16, body: &[u8]) {
        self.script.lock().unwrap().push_back((status, body.to_vec()));
    }
}

/// Simulated clock that requests shutdown once `limit` has passed.
struct Bounded<'a> {
    inner: SimulatedClock,
    stop_at: Duration,
    shutdown: &'a AtomicBool,
}

impl Clock for Bounded<'_> {
    fn now(&self) -> Duration {
        self.inner.now()
    }

    fn sleep(&self, d: Duration) {
        self.inner.sleep(d);
        if self.inner.now() >= self.stop_at {
            self.shutdown.store(true, Ordering::SeqCst);
        }
    }
}

const NOON_UTC: (i32, u32, u32) = (2025, 7, 8);

fn noon() -> u64 {
    let (y, m, d) = NOON_UTC;
    Utc.with_ymd_and_hms(y, m, d, 12, 0, 0).unwrap().timestamp() as u64
}

fn day() -> NaiveDate {
    let (y, m, d) = NOON_UTC;
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn config(root: &Path, base: &str) -> ArchiverConfig {
    let mut c = ArchiverConfig::from_toml_str(&format!(
        "rt_feed_url = \"{base}/rt\"\ntimetable_url = \"{base}/gtfs.zip\"\npoll_interval = 30\n\
         api_key = \"k\"\nrequest_timeout = 5\n"
    ))
    .unwrap();
    c.archive_root = root.to_path_buf();
    c
}

fn run_five_minutes(cfg: &ArchiverConfig) -> usize {
    let shutdown = AtomicBool::new(false);
    let clock = Bounded {
        inner: SimulatedClock::starting_at(noon()),
        stop_at: Duration::from_secs(noon() + 299),
        shutdown: &shutdown,
    };
    let fetcher = HttpFetcher::new(cfg).unwrap();
    run_rt_collector(cfg, &fetcher, &clock, &shutdown).unwrap().len()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn five_minutes_at_thirty_seconds_is_ten_snapshots() {
    let stub = Stub::start(b"feed".to_vec());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &stub.url);
    assert_eq!(run_five_minutes(&cfg), 10);
    let files = files_in(&rt_day_dir(tmp.path(), day()));
    assert_eq!(files.len(), 10);
    assert_eq!(files[0], format!("{}.pbf", noon()));
    assert_eq!(files[9], format!("{}.pbf", noon() + 270));
    assert!(stub.seen.lock().unwrap().iter().all(|t| t == "/rt?api_key=k"));
}

#[test]
fn failed_poll_is_skipped_and_collection_continues() {
    let stub = Stub::start(b"feed".to_vec());
    for _ in 0..3 {
        stub.push(200, b"feed");
    }
    stub.push(500, b"");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), &stub.url);
    cfg.retry_policy.max_attempts = 1;
    assert_eq!(run_five_minutes(&cfg), 9);
    let files = files_in(&rt_day_dir(tmp.path(), day()));
    assert!(!files.contains(&format!("{}.pbf", noon() + 90)));
    assert!(files.contains(&format!("{}.pbf", noon() + 120)));
}

#[test]
fn transient_error_is_retried() {
    let stub = Stub::start(b"feed".to_vec());
    stub.push(503, b"");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &stub.url);
    assert_eq!(run_five_minutes(&cfg), 10);
    assert_eq!(stub.seen.lock().unwrap().len(), 11);
}

fn zip_bytes(content: &str) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    w.start_file("agency.txt", SimpleFileOptions::default()).unwrap();
    w.write_all(content.as_bytes()).unwrap();
    w.finish().unwrap().into_inner()
}

#[test]
fn timetable_once_per_day_with_force_and_quarantine() {
    let first = zip_bytes("a");
    let second = zip_bytes("b");
    let stub = Stub::start(first.clone());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &stub.url);
    let tz = cfg.tz().unwrap();
    let fetcher = HttpFetcher::new(&cfg).unwrap();
    let clock = SimulatedClock::starting_at(noon());
    let path = timetable_path(tmp.path(), day());

    assert!(matches!(collect_timetable_once(&cfg, tz, &fetcher, &clock, false).unwrap(), TimetableOutcome::Archived(_)));
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(
        collect_timetable_once(&cfg, tz, &fetcher, &clock, false).unwrap(),
        TimetableOutcome::AlreadyPresent(path.clone())
    );
    assert_eq!(stub.seen.lock().unwrap().len(), 1);

    stub.push(200, &second);
    assert!(matches!(collect_timetable_once(&cfg, tz, &fetcher, &clock, true).unwrap(), TimetableOutcome::Archived(_)));
    assert_eq!(std::fs::read(&path).unwrap(), second);

    // next day: an HTML error page with status 200
    clock.advance(Duration::from_secs(86_400));
    stub.push(200, b"<html>maintenance</html>");
    let TimetableOutcome::Quarantined(q) = collect_timetable_once(&cfg, tz, &fetcher, &clock, false).unwrap() else {
        panic!("expected quarantine");
    };
    assert_eq!(std::fs::read(&q).unwrap(), b"<html>maintenance</html>");
    assert!(!timetable_path(tmp.path(), day().succ_opt().unwrap()).exists());
}
