//! Periodic collectors for the real-time vehicle-position feed and the daily
//! GTFS timetable, writing into a date-partitioned archive:
//!
//! ```text
//! <root>/rt/<YYYY-MM-DD>/<epoch_seconds>.pbf
//! <root>/gtfs/<YYYY-MM-DD>.zip
//! <root>/gtfs/quarantine/<YYYY-MM-DD>-<epoch_seconds>.zip
//! ```
//!
//! Every write goes through a temporary file and a rename, so a crash never
//! leaves a partial file at a final path.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, NaiveDate, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{error, info, warn};

use crate::model::EpochTimestamp;
use crate::util::{atomic_write, atomic_write_new, sha256_hex};

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("config: {0}")]
    Config(String),
    #[error("archive write failed at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPlacement {
    #[default]
    Query,
    Header,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Seconds before the second attempt; doubles on each further attempt.
    pub backoff_base: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchiverConfig {
    pub rt_feed_url: String,
    pub timetable_url: String,
    /// Seconds between real-time polls.
    pub poll_interval: u64,
    pub archive_root: PathBuf,
    pub api_key: Option<String>,
    pub api_key_name: String,
    pub api_key_placement: KeyPlacement,
    pub retry_policy: RetryPolicy,
    /// Zone used to assign fetches to archive days.
    pub timezone: String,
    /// Seconds between checks for a new day's timetable.
    pub timetable_check_interval: u64,
    pub request_timeout: u64,
}

impl Default for ArchiverConfig {
    fn default() -> Self {
        Self {
            rt_feed_url: String::new(),
            timetable_url: String::new(),
            poll_interval: 30,
            archive_root: PathBuf::from("archive"),
            api_key: None,
            api_key_name: "api_key".into(),
            api_key_placement: KeyPlacement::Query,
            retry_policy: RetryPolicy::default(),
            timezone: "Europe/London".into(),
            timetable_check_interval: 3600,
            request_timeout: 120,
        }
    }
}

pub const ENV_RT_URL: &str = "RTC_RT_URL";
pub const ENV_TT_URL: &str = "RTC_TT_URL";
pub const ENV_API_KEY: &str = "RTC_API_KEY";
pub const ENV_ARCHIVE_ROOT: &str = "RTC_ARCHIVE_ROOT";
pub const ENV_POLL_INTERVAL: &str = "RTC_POLL_INTERVAL";

impl ArchiverConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ArchiveError> {
        toml::from_str(s).map_err(|e| ArchiveError::Config(e.to_string()))
    }

    /// Reads the TOML file, then applies `RTC_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ArchiveError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ArchiveError> {
        if let Some(v) = var(ENV_RT_URL) {
            self.rt_feed_url = v;
        }
        if let Some(v) = var(ENV_TT_URL) {
            self.timetable_url = v;
        }
        if let Some(v) = var(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = var(ENV_ARCHIVE_ROOT) {
            self.archive_root = PathBuf::from(v);
        }
        if let Some(v) = var(ENV_POLL_INTERVAL) {
            self.poll_interval = v
                .trim()
                .parse()
                .map_err(|_| ArchiveError::Config(format!("{ENV_POLL_INTERVAL}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn tz(&self) -> Result<Tz, ArchiveError> {
        self.timezone
            .parse()
            .map_err(|_| ArchiveError::Config(format!("unknown timezone {:?}", self.timezone)))
    }

    /// Checks ranges and that the archive root can be written.
    pub fn validate(&self) -> Result<(), ArchiveError> {
        if self.poll_interval < 1 {
            return Err(ArchiveError::Config("poll_interval must be >= 1".into()));
        }
        if self.retry_policy.max_attempts < 1 {
            return Err(ArchiveError::Config("retry_policy.max_attempts must be >= 1".into()));
        }
        if self.retry_policy.backoff_base.is_nan() || self.retry_policy.backoff_base < 0.0 {
            return Err(ArchiveError::Config("retry_policy.backoff_base must be >= 0".into()));
        }
        self.tz()?;
        let io_err = |e| ArchiveError::Io { path: self.archive_root.clone(), source: e };
        std::fs::create_dir_all(&self.archive_root).map_err(io_err)?;
        tempfile::tempfile_in(&self.archive_root).map_err(io_err)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    RtSnapshot,
    TimetableDaily,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub fetched_at: EpochTimestamp,
    pub kind: ArchiveKind,
    pub path: PathBuf,
    pub byte_size: u64,
    pub content_hash: String,
}

pub fn rt_day_dir(root: &Path, date: NaiveDate) -> PathBuf {
    root.join("rt").join(date.format("%Y-%m-%d").to_string())
}

pub fn rt_snapshot_path(root: &Path, date: NaiveDate, fetched_at: EpochTimestamp) -> PathBuf {
    rt_day_dir(root, date).join(format!("{}.pbf", fetched_at.0))
}

pub fn timetable_path(root: &Path, date: NaiveDate) -> PathBuf {
    root.join("gtfs").join(format!("{}.zip", date.format("%Y-%m-%d")))
}

pub fn quarantine_path(root: &Path, date: NaiveDate, fetched_at: EpochTimestamp) -> PathBuf {
    root.join("gtfs")
        .join("quarantine")
        .join(format!("{}-{}.zip", date.format("%Y-%m-%d"), fetched_at.0))
}

/// Local calendar date of an instant in `tz`.
pub fn local_date(t: EpochTimestamp, tz: Tz) -> NaiveDate {
    DateTime::<Utc>::from_timestamp(t.0 as i64, 0)
        .expect("timestamp in range")
        .with_timezone(&tz)
        .date_naive()
}

pub trait Fetch: Send + Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>, FetchError>;
}

pub struct HttpFetcher {
    client: reqwest::blocking::Client,
    api_key: Option<(String, String)>,
    placement: KeyPlacement,
}

impl HttpFetcher {
    pub fn new(config: &ArchiverConfig) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout.max(1)))
            .user_agent(concat!("rtc/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            api_key: config.api_key.clone().map(|k| (config.api_key_name.clone(), k)),
            placement: config.api_key_placement,
        })
    }
}

impl Fetch for HttpFetcher {
    fn get(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let mut req = self.client.get(url);
        if let Some((name, key)) = &self.api_key {
            req = match self.placement {
                KeyPlacement::Query => req.query(&[(name, key)]),
                KeyPlacement::Header => req.header(name.as_str(), key.as_str()),
            };
        }
        let resp = req.send().map_err(|e| FetchError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(FetchError::Status(status.as_u16()));
        }
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| FetchError::Transport(e.to_string()))
    }
}

/// Time source for the collectors.
pub trait Clock: Send + Sync {
    /// Time since the Unix epoch.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// A clock whose `sleep` advances time instantly. Used by tests and replays
/// to drive the collectors through hours of schedule in milliseconds.
pub struct SimulatedClock {
    now: Mutex<Duration>,
    /// Simulated cost of each `now()` call, mimicking fetch latency.
    pub tick: Duration,
}

impl SimulatedClock {
    pub fn starting_at(epoch_secs: u64) -> Self {
        Self { now: Mutex::new(Duration::from_secs(epoch_secs)), tick: Duration::ZERO }
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for SimulatedClock {
    fn now(&self) -> Duration {
        let mut now = self.now.lock().unwrap();
        let t = *now;
        *now += self.tick;
        t
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Sleeps until `deadline` in short slices so a shutdown request is noticed.
/// Returns false if shutdown was requested.
fn sleep_until(clock: &dyn Clock, deadline: Duration, shutdown: &AtomicBool) -> bool {
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return false;
        }
        let now = clock.now();
        if now >= deadline {
            return true;
        }
        clock.sleep((deadline - now).min(Duration::from_millis(500)));
    }
}

fn fetch_with_retry(fetcher: &dyn Fetch, clock: &dyn Clock, url: &str, policy: &RetryPolicy) -> Result<Vec<u8>, FetchError> {
    let mut attempt = 1;
    loop {
        match fetcher.get(url) {
            Ok(b) => return Ok(b),
            Err(e) if attempt >= policy.max_attempts => return Err(e),
            Err(e) => {
                let backoff = policy.backoff_base * 2f64.powi(attempt as i32 - 1);
                warn!(url, attempt, error = %e, backoff_s = backoff, "fetch failed, retrying");
                clock.sleep(Duration::from_secs_f64(backoff));
                attempt += 1;
            }
        }
    }
}

fn entry(fetched_at: EpochTimestamp, kind: ArchiveKind, path: PathBuf, bytes: &[u8]) -> ArchiveEntry {
    ArchiveEntry {
        fetched_at,
        kind,
        path,
        byte_size: bytes.len() as u64,
        content_hash: sha256_hex(bytes),
    }
}

/// One real-time poll. Fetch failures are logged and yield `Ok(None)`; only
/// archive write failures are errors.
pub fn poll_rt_once(
    config: &ArchiverConfig,
    tz: Tz,
    fetcher: &dyn Fetch,
    clock: &dyn Clock,
) -> Result<Option<ArchiveEntry>, ArchiveError> {
    let fetched_at = EpochTimestamp(clock.now().as_secs());
    let bytes = match fetch_with_retry(fetcher, clock, &config.rt_feed_url, &config.retry_policy) {
        Ok(b) => b,
        Err(e) => {
            error!(url = %config.rt_feed_url, error = %e, "real-time poll failed");
            return Ok(None);
        }
    };
    let path = rt_snapshot_path(&config.archive_root, local_date(fetched_at, tz), fetched_at);
    match atomic_write_new(&path, &bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
            warn!(path = %path.display(), "snapshot already archived for this second; skipped");
            return Ok(None);
        }
        Err(e) => return Err(ArchiveError::Io { path, source: e }),
    }
    let e = entry(fetched_at, ArchiveKind::RtSnapshot, path, &bytes);
    info!(path = %e.path.display(), bytes = e.byte_size, sha256 = %e.content_hash, "archived snapshot");
    Ok(Some(e))
}

/// Polls the real-time feed every `poll_interval` seconds, anchored to the
/// loop start, until `shutdown` is set. Returns only on shutdown or on a
/// fatal archive write error.
pub fn run_rt_collector(
    config: &ArchiverConfig,
    fetcher: &dyn Fetch,
    clock: &dyn Clock,
    shutdown: &AtomicBool,
) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    config.validate()?;
    let tz = config.tz()?;
    let interval = Duration::from_secs(config.poll_interval);
    let start = clock.now();
    let mut written = Vec::new();
    let mut tick: u32 = 0;
    loop {
        if !sleep_until(clock, start + interval * tick, shutdown) {
            break;
        }
        if let Some(e) = poll_rt_once(config, tz, fetcher, clock)? {
            written.push(e);
        }
        // skip ticks missed by a slow fetch rather than firing them back to back
        let elapsed = clock.now().saturating_sub(start);
        tick = (tick + 1).max(elapsed.as_secs().div_ceil(config.poll_interval) as u32);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimetableOutcome {
    Archived(ArchiveEntry),
    AlreadyPresent(PathBuf),
    Quarantined(PathBuf),
    FetchFailed,
}

/// Cheap structural check: local-file magic and a readable central directory.
pub fn looks_like_zip(bytes: &[u8]) -> bool {
    bytes.starts_with(b"PK\x03\x04") && zip::ZipArchive::new(io::Cursor::new(bytes)).is_ok()
}

/// Archives today's timetable unless it is already present. `force`
/// re-fetches and replaces an existing file.
pub fn collect_timetable_once(
    config: &ArchiverConfig,
    tz: Tz,
    fetcher: &dyn Fetch,
    clock: &dyn Clock,
    force: bool,
) -> Result<TimetableOutcome, ArchiveError> {
    let fetched_at = EpochTimestamp(clock.now().as_secs());
    let date = local_date(fetched_at, tz);
    let path = timetable_path(&config.archive_root, date);
    if path.exists() && !force {
        return Ok(TimetableOutcome::AlreadyPresent(path));
    }
    let bytes = match fetch_with_retry(fetcher, clock, &config.timetable_url, &config.retry_policy) {
        Ok(b) => b,
        Err(e) => {
            error!(url = %config.timetable_url, error = %e, "timetable fetch failed");
            return Ok(TimetableOutcome::FetchFailed);
        }
    };
    if !looks_like_zip(&bytes) {
        let q = quarantine_path(&config.archive_root, date, fetched_at);
        atomic_write(&q, &bytes).map_err(|e| ArchiveError::Io { path: q.clone(), source: e })?;
        error!(path = %q.display(), bytes = bytes.len(), "timetable is not a valid ZIP; quarantined");
        return Ok(TimetableOutcome::Quarantined(q));
    }
    let res = if force { atomic_write(&path, &bytes) } else { atomic_write_new(&path, &bytes) };
    match res {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Ok(TimetableOutcome::AlreadyPresent(path)),
        Err(e) => return Err(ArchiveError::Io { path, source: e }),
    }
    let e = entry(fetched_at, ArchiveKind::TimetableDaily, path, &bytes);
    info!(path = %e.path.display(), bytes = e.byte_size, sha256 = %e.content_hash, "archived timetable");
    Ok(TimetableOutcome::Archived(e))
}

/// Checks for a new day's timetable every `timetable_check_interval` seconds
/// until `shutdown` is set. `force` applies to the first check only.
pub fn run_timetable_collector(
    config: &ArchiverConfig,
    fetcher: &dyn Fetch,
    clock: &dyn Clock,
    shutdown: &AtomicBool,
    force: bool,
) -> Result<Vec<TimetableOutcome>, ArchiveError> {
    config.validate()?;
    let tz = config.tz()?;
    let interval = Duration::from_secs(config.timetable_check_interval.max(1));
    let start = clock.now();
    let mut outcomes = Vec::new();
    let mut tick: u32 = 0;
    while sleep_until(clock, start + interval * tick, shutdown) {
        outcomes.push(collect_timetable_once(config, tz, fetcher, clock, force && tick == 0)?);
        tick += 1;
    }
    Ok(outcomes)
}
