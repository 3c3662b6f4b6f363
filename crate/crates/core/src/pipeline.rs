//! One-command daily run: ingest the day's snapshots, resolve trips against
//! the timetable window, match, infer, and write the bundle and report.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use chrono::NaiveDate;
use chrono_tz::Tz;
use rayon::prelude::*;
use thiserror::Error;
use tracing::{info, warn};

use crate::archive::{rt_day_dir, timetable_path};
use crate::inference::{infer_stop_times, to_service_time, CorrectedTrip, InferenceError, InferenceStats};
use crate::ingest::{ingest_day, IngestError};
use crate::matcher::{match_observation, reduce_matches, MatchStats, MatcherConfig, DEFAULT_RADIUS_M};
use crate::model::{ScheduledTrip, ServiceTime, VehiclePositionRecord};
use crate::resolver::{build_window, ResolutionStats, ResolutionWindow, ResolveError};
use crate::writer::{
    bundle_path, report_path, write_bundle, write_run_report, CorrectedGtfsBundle, OutputStats, ReportConfig,
    RunReport, WindowStats,
};

pub const EXIT_MISSING_ARCHIVE: i32 = 2;
pub const EXIT_FATAL_LOAD: i32 = 3;
pub const EXIT_WRITE_FAILURE: i32 = 4;
/// Invalid configuration, detected before any work starts.
pub const EXIT_CONFIG: i32 = 1;

/// Upper bounds accepted for the tunable knobs.
pub const MAX_WINDOW_DAYS: u32 = 60;
pub const MAX_RADIUS_M: f64 = 5_000.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("archive incomplete: {0}")]
    MissingArchive(String),
    #[error("fatal load error: {0}")]
    FatalLoad(String),
    #[error("write failed: {0}")]
    Write(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::MissingArchive(_) => EXIT_MISSING_ARCHIVE,
            Self::FatalLoad(_) => EXIT_FATAL_LOAD,
            Self::Write(_) => EXIT_WRITE_FAILURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub archive_root: PathBuf,
    pub work_root: PathBuf,
    pub timezone: Tz,
    pub radius_m: f64,
    pub window_before: u32,
    pub window_after: u32,
    pub min_matches: usize,
    pub worker_count: usize,
    pub log_level: String,
}

impl PipelineConfig {
    pub fn new(archive_root: impl Into<PathBuf>, work_root: impl Into<PathBuf>) -> Self {
        Self {
            archive_root: archive_root.into(),
            work_root: work_root.into(),
            timezone: chrono_tz::Europe::London,
            radius_m: DEFAULT_RADIUS_M,
            window_before: 7,
            window_after: 7,
            min_matches: 1,
            worker_count: std::thread::available_parallelism().map_or(1, |n| n.get()),
            log_level: "info".into(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.radius_m > 0.0 && self.radius_m <= MAX_RADIUS_M) {
            return bad(format!("radius_m must be in (0, {MAX_RADIUS_M}], got {}", self.radius_m));
        }
        if self.window_before > MAX_WINDOW_DAYS || self.window_after > MAX_WINDOW_DAYS {
            return bad(format!("window sizes must be at most {MAX_WINDOW_DAYS} days"));
        }
        if self.worker_count == 0 {
            return bad("worker_count must be at least 1".into());
        }
        Ok(())
    }

    fn report_config(&self) -> ReportConfig {
        ReportConfig {
            timezone: self.timezone.name().to_string(),
            radius_m: self.radius_m,
            window_before: self.window_before,
            window_after: self.window_after,
            min_matches: self.min_matches,
        }
    }
}

/// A corrected day held in memory.
#[derive(Debug, Clone)]
pub struct CorrectedDay {
    pub bundle: CorrectedGtfsBundle,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct DayOutcome {
    pub date: NaiveDate,
    pub bundle_path: PathBuf,
    pub report_path: PathBuf,
    pub report: RunReport,
}

struct TripResult {
    corrected: Option<CorrectedTrip>,
    matching: MatchStats,
    inference: InferenceStats,
}

fn process_trip(
    trip: &ScheduledTrip,
    source: &crate::gtfs::TimetableSnapshot,
    records: &[&VehiclePositionRecord],
    config: &PipelineConfig,
    matcher: &MatcherConfig,
    date: NaiveDate,
) -> TripResult {
    let (route, missing) = source.route_stops(trip);
    let mut matching = MatchStats {
        observations: records.len() as u64,
        trips_observed: 1,
        scheduled_stops: trip.stop_times.len() as u64,
        stops_without_location: missing as u64,
        ..Default::default()
    };
    let mut matches = Vec::new();
    for r in records {
        let Some(m) = match_observation(r, &trip.trip_id, &route, matcher) else { continue };
        matching.observations_matched += 1;
        if to_service_time(m.observed_at, date, config.timezone).is_err() {
            matching.observations_out_of_window += 1;
            continue;
        }
        matches.push(m);
    }
    let reduced = reduce_matches(matches);
    matching.stops_matched = reduced.by_sequence.len() as u64;
    matching.matches_demoted = reduced.demoted as u64;

    let observed: BTreeMap<u32, ServiceTime> = reduced
        .by_sequence
        .iter()
        .map(|(&seq, m)| (seq, to_service_time(m.observed_at, date, config.timezone).expect("checked above")))
        .collect();
    let mut inference = InferenceStats::default();
    let corrected = match infer_stop_times(trip, &observed, config.min_matches) {
        Ok(Some(inferred)) => {
            inference.record(&inferred);
            Some(CorrectedTrip {
                trip_id: trip.trip_id.clone(),
                route_id: trip.route_id.clone(),
                headsign: trip.headsign.clone(),
                direction_id: trip.direction_id,
                source_snapshot_date: source.snapshot_date,
                service_date: date,
                stop_times: inferred.stop_times,
                match_count: inferred.match_count,
            })
        }
        Ok(None) => {
            inference.trips_below_min_matches += 1;
            None
        }
        Err(InferenceError::NoAnchors(id)) => {
            warn!(trip_id = %id, "trip observed but no stop matched; left out");
            inference.trips_below_min_matches += 1;
            None
        }
        Err(e) => unreachable!("inference only fails for lack of anchors: {e}"),
    };
    TripResult { corrected, matching, inference }
}

fn correct_with_window(
    config: &PipelineConfig,
    date: NaiveDate,
    window: &ResolutionWindow,
    records: &[VehiclePositionRecord],
    ingest: crate::ingest::IngestStats,
) -> Result<CorrectedDay, PipelineError> {
    let matcher = MatcherConfig::new(config.radius_m).map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut by_trip: HashMap<&str, Vec<&VehiclePositionRecord>> = HashMap::new();
    let mut resolution = ResolutionStats::default();
    for r in records {
        match r.trip_id.as_deref() {
            Some(t) => by_trip.entry(t).or_default().push(r),
            None => resolution.no_trip_id += 1,
        }
    }
    let mut trip_ids: Vec<&str> = by_trip.keys().copied().collect();
    trip_ids.sort_unstable();

    let outcomes: Vec<_> = trip_ids.par_iter().map(|id| window.resolve_trip_id(Some(id))).collect();
    let mut work = Vec::new();
    for (id, outcome) in trip_ids.iter().zip(&outcomes) {
        let n = by_trip[id].len() as u64;
        resolution.add(outcome.status, n);
        if window.inactive_same_day(id) {
            resolution.same_day_inactive += n;
        }
        if let (Some(trip), Some(source)) = (&outcome.trip, &outcome.source) {
            work.push((trip.clone(), source.clone(), &by_trip[id]));
        }
    }
    resolution.missing_window_days = window.missing_days() as u64;
    info!(date = %date, trips = work.len(), resolved = resolution.resolved(), total = resolution.total(), "resolved trips");

    let results: Vec<TripResult> = work
        .par_iter()
        .map(|(trip, source, recs)| process_trip(trip, source, recs, config, &matcher, date))
        .collect();

    let mut matching = MatchStats::default();
    let mut inference = InferenceStats::default();
    let mut corrected = Vec::new();
    for r in results {
        matching.merge(&r.matching);
        inference.merge(&r.inference);
        corrected.extend(r.corrected);
    }
    info!(date = %date, corrected = corrected.len(), below_min = inference.trips_below_min_matches, "inferred stop times");

    let sources = window.loaded_snapshots();
    let bundle = CorrectedGtfsBundle::assemble(date, corrected, &sources, config.timezone.name())
        .map_err(|e| PipelineError::FatalLoad(e.to_string()))?;
    let window_stats = WindowStats {
        probed_days: window.probe_dates().len() as u64,
        loaded_days: window.loaded_dates().len() as u64,
        missing_days: window.missing_days() as u64,
        target_dropped_rows: window.target().stats.dropped_rows(),
    };
    let report = RunReport::new(
        date,
        config.report_config(),
        ingest,
        window_stats,
        resolution,
        matching,
        inference,
        OutputStats::of(&bundle),
    );
    Ok(CorrectedDay { bundle, report })
}

fn pool(config: &PipelineConfig) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

/// Corrects `date` without writing anything.
pub fn correct_day(config: &PipelineConfig, date: NaiveDate) -> Result<CorrectedDay, PipelineError> {
    config.validate()?;
    let root = &config.archive_root;
    if !rt_day_dir(root, date).is_dir() {
        return Err(PipelineError::MissingArchive(format!("no realtime snapshots for {date}")));
    }
    if !timetable_path(root, date).is_file() {
        return Err(PipelineError::MissingArchive(format!("no timetable archived for {date}")));
    }
    pool(config)?.install(|| {
        let table = ingest_day(root, date).map_err(|e| match e {
            IngestError::MissingDay { .. } => PipelineError::MissingArchive(e.to_string()),
            other => PipelineError::FatalLoad(other.to_string()),
        })?;
        info!(date = %date, raw = table.stats.raw_records, kept = table.records.len(),
              parse_failures = table.stats.parse_failures, "ingested snapshots");
        if table.stats.parse_failures > 0 {
            warn!(date = %date, parse_failures = table.stats.parse_failures, "some snapshots could not be decoded");
        }
        let window = build_window(root, date, config.window_before, config.window_after).map_err(|e| match e {
            ResolveError::MissingTarget { .. } => PipelineError::MissingArchive(e.to_string()),
            ResolveError::TargetLoad { .. } => PipelineError::FatalLoad(e.to_string()),
        })?;
        correct_with_window(config, date, &window, &table.records, table.stats)
    })
}

/// Corrects `date` against an already-open window over in-memory records.
pub fn correct_records(
    config: &PipelineConfig,
    date: NaiveDate,
    window: &ResolutionWindow,
    records: &[VehiclePositionRecord],
    ingest: crate::ingest::IngestStats,
) -> Result<CorrectedDay, PipelineError> {
    config.validate()?;
    pool(config)?.install(|| correct_with_window(config, date, window, records, ingest))
}

/// Corrects `date` and writes `<work>/corrected/<D>.gtfs.zip` and
/// `<work>/reports/<D>.json`. Nothing is written unless correction succeeds.
pub fn run_day(config: &PipelineConfig, date: NaiveDate) -> Result<DayOutcome, PipelineError> {
    let day = correct_day(config, date)?;
    let bundle_path = bundle_path(&config.work_root, date);
    let report_path = report_path(&config.work_root, date);
    write_bundle(&day.bundle, &bundle_path).map_err(|e| PipelineError::Write(e.to_string()))?;
    write_run_report(&day.report, &report_path).map_err(|e| PipelineError::Write(e.to_string()))?;
    info!(date = %date, bundle = %bundle_path.display(), trips = day.report.output.trips, "day written");
    Ok(DayOutcome { date, bundle_path, report_path, report: day.report })
}

#[derive(Debug, Clone)]
pub struct DayStatus {
    pub date: NaiveDate,
    pub exit_code: i32,
    pub outcome: Result<DayOutcome, String>,
}

/// Runs each day from `start` to `end` inclusive; a failed day does not
/// stop the others.
pub fn run_range(config: &PipelineConfig, start: NaiveDate, end: NaiveDate) -> Vec<DayStatus> {
    start
        .iter_days()
        .take_while(|d| *d <= end)
        .map(|date| match run_day(config, date) {
            Ok(o) => DayStatus { date, exit_code: 0, outcome: Ok(o) },
            Err(e) => {
                warn!(date = %date, code = e.exit_code(), error = %e, "day failed");
                DayStatus { date, exit_code: e.exit_code(), outcome: Err(e.to_string()) }
            }
        })
        .collect()
}

/// Exit status for a range: 0 if every day succeeded, otherwise the first
/// failing day's code.
pub fn range_exit_code(statuses: &[DayStatus]) -> i32 {
    statuses.iter().map(|s| s.exit_code).find(|&c| c != 0).unwrap_or(0)
}
