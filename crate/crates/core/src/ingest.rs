//! Decoding of archived GTFS-RT snapshots into a deduplicated daily table of
//! vehicle positions, plus its CSV form.

use std::cmp::Ordering;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use prost::Message;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::archive::rt_day_dir;
use crate::gtfs_rt::{FeedEntity, FeedMessage};
use crate::model::{EpochTimestamp, GeoPoint, VehiclePositionRecord};
use crate::util::atomic_write;

pub const CSV_HEADER: [&str; 7] = [
    "observed_at",
    "vehicle_id",
    "trip_id",
    "route_id",
    "latitude",
    "longitude",
    "start_date",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed GTFS-RT payload: {0}")]
    Decode(#[from] prost::DecodeError),
    #[error("no snapshot directory for {date} under {path}")]
    MissingDay { date: NaiveDate, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path} line {line}: {reason}")]
    BadRow { path: PathBuf, line: u64, reason: String },
}

/// Outcome of decoding one snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedSnapshot {
    pub records: Vec<VehiclePositionRecord>,
    pub trip_update_entities: usize,
    pub alert_entities: usize,
    /// Vehicle entities without usable position, identity or timestamp.
    pub unusable_entities: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub snapshots_read: u64,
    pub raw_records: u64,
    pub deduplicated_records: u64,
    pub records_with_trip_id: u64,
    pub parse_failures: u64,
    pub skipped_trip_update_entities: u64,
    pub skipped_alert_entities: u64,
    pub unusable_entities: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyPositionTable {
    pub service_date: NaiveDate,
    /// Sorted by `(vehicle_id, observed_at)`, no duplicates under the dedup key.
    pub records: Vec<VehiclePositionRecord>,
    pub stats: IngestStats,
}

/// GTFS-RT coordinates are float32; they are stored at microdegree precision
/// so the CSV form round-trips exactly.
fn normalize_coord(v: f32) -> f64 {
    ((v as f64) * 1e6).round() / 1e6 + 0.0
}

fn non_empty(s: Option<&String>) -> Option<String> {
    s.map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string)
}

fn entity_record(entity: &FeedEntity, header_ts: Option<u64>) -> Option<VehiclePositionRecord> {
    let vp = entity.vehicle.as_ref()?;
    let pos = vp.position.as_ref()?;
    let position = GeoPoint::new(normalize_coord(pos.latitude), normalize_coord(pos.longitude)).ok()?;
    let observed_at = vp.timestamp.filter(|&t| t > 0).or(header_ts)?;
    let vehicle = vp.vehicle.as_ref();
    let vehicle_id = non_empty(vehicle.and_then(|v| v.id.as_ref()))
        .or_else(|| non_empty(vehicle.and_then(|v| v.label.as_ref())))
        .or_else(|| non_empty(Some(&entity.id)))?;
    let trip = vp.trip.as_ref();
    Some(VehiclePositionRecord {
        observed_at: EpochTimestamp(observed_at),
        vehicle_id,
        trip_id: non_empty(trip.and_then(|t| t.trip_id.as_ref())),
        route_id: non_empty(trip.and_then(|t| t.route_id.as_ref())),
        position,
        start_date: trip
            .and_then(|t| t.start_date.as_deref())
            .and_then(|d| NaiveDate::parse_from_str(d, "%Y%m%d").ok()),
    })
}

/// Decodes one `FeedMessage`. Trip updates and alerts are counted and
/// skipped. The entity timestamp wins over the header timestamp.
pub fn parse_rt_snapshot(bytes: &[u8]) -> Result<ParsedSnapshot, IngestError> {
    let feed = FeedMessage::decode(bytes)?;
    let header_ts = feed.header.timestamp.filter(|&t| t > 0);
    let mut out = ParsedSnapshot::default();
    for entity in &feed.entity {
        if entity.is_deleted == Some(true) {
            continue;
        }
        if entity.vehicle.is_some() {
            match entity_record(entity, header_ts) {
                Some(r) => out.records.push(r),
                None => out.unusable_entities += 1,
            }
        } else if entity.trip_update.is_some() {
            out.trip_update_entities += 1;
        } else if entity.alert.is_some() {
            out.alert_entities += 1;
        }
    }
    Ok(out)
}

fn record_order(a: &VehiclePositionRecord, b: &VehiclePositionRecord) -> Ordering {
    a.vehicle_id
        .cmp(&b.vehicle_id)
        .then(a.observed_at.cmp(&b.observed_at))
        .then(a.position.lat().total_cmp(&b.position.lat()))
        .then(a.position.lon().total_cmp(&b.position.lon()))
        .then_with(|| a.trip_id.cmp(&b.trip_id))
        .then_with(|| a.route_id.cmp(&b.route_id))
        .then_with(|| a.start_date.cmp(&b.start_date))
}

fn same_key(a: &VehiclePositionRecord, b: &VehiclePositionRecord) -> bool {
    a.vehicle_id == b.vehicle_id
        && a.observed_at == b.observed_at
        && a.position.lat().to_bits() == b.position.lat().to_bits()
        && a.position.lon().to_bits() == b.position.lon().to_bits()
}

/// Merges a day's snapshots and drops records repeating
/// `(vehicle_id, latitude, longitude, observed_at)`. When duplicates disagree
/// on other fields the first in sort order is kept, so the output does not
/// depend on snapshot order.
pub fn merge_and_deduplicate(
    snapshots: Vec<Vec<VehiclePositionRecord>>,
    service_date: NaiveDate,
) -> DailyPositionTable {
    let snapshots_read = snapshots.len() as u64;
    let mut records: Vec<_> = snapshots.into_iter().flatten().collect();
    let raw_records = records.len() as u64;
    records.par_sort_unstable_by(record_order);
    records.dedup_by(|b, a| same_key(a, b));
    let stats = IngestStats {
        snapshots_read,
        raw_records,
        deduplicated_records: records.len() as u64,
        records_with_trip_id: records.iter().filter(|r| r.trip_id.is_some()).count() as u64,
        ..IngestStats::default()
    };
    DailyPositionTable { service_date, records, stats }
}

/// Snapshot files of one day in temporal (filename) order.
pub fn list_snapshots(archive_root: &Path, date: NaiveDate) -> Result<Vec<PathBuf>, IngestError> {
    let dir = rt_day_dir(archive_root, date);
    let entries = fs::read_dir(&dir).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => IngestError::MissingDay { date, path: dir.clone() },
        _ => IngestError::Io { path: dir.clone(), source: e },
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| IngestError::Io { path: dir.clone(), source: e })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "pbf") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads, decodes and deduplicates every snapshot archived for `date`.
/// Unreadable or malformed snapshots are counted, never fatal.
pub fn ingest_day(archive_root: &Path, date: NaiveDate) -> Result<DailyPositionTable, IngestError> {
    let files = list_snapshots(archive_root, date)?;
    let parsed: Vec<Option<ParsedSnapshot>> = files
        .par_iter()
        .map(|path| {
            let bytes = match fs::read(path) {
                Ok(b) => b,
                Err(e) => {
                    warn!(path = %path.display(), error = %e, "unreadable snapshot");
                    return None;
                }
            };
            match parse_rt_snapshot(&bytes) {
                Ok(p) => Some(p),
                Err(e) => {
                    warn!(path = %path.display(), error = %e, "snapshot parse failure");
                    None
                }
            }
        })
        .collect();

    let mut parse_failures = 0;
    let (mut trip_updates, mut alerts, mut unusable) = (0, 0, 0);
    let mut lists = Vec::with_capacity(parsed.len());
    for p in parsed {
        match p {
            Some(p) => {
                trip_updates += p.trip_update_entities as u64;
                alerts += p.alert_entities as u64;
                unusable += p.unusable_entities as u64;
                lists.push(p.records);
            }
            None => {
                parse_failures += 1;
                lists.push(Vec::new());
            }
        }
    }
    let mut table = merge_and_deduplicate(lists, date);
    table.stats.parse_failures = parse_failures;
    table.stats.skipped_trip_update_entities = trip_updates;
    table.stats.skipped_alert_entities = alerts;
    table.stats.unusable_entities = unusable;
    debug!(date = %date, stats = ?table.stats, "ingested day");
    Ok(table)
}

pub fn positions_csv_path(work_root: &Path, date: NaiveDate) -> PathBuf {
    work_root.join("positions").join(format!("{}.csv", date.format("%Y-%m-%d")))
}

pub fn write_positions_csv<W: io::Write>(records: &[VehiclePositionRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.observed_at.to_string(),
            r.vehicle_id.clone(),
            r.trip_id.clone().unwrap_or_default(),
            r.route_id.clone().unwrap_or_default(),
            format!("{:.6}", r.position.lat()),
            format!("{:.6}", r.position.lon()),
            r.start_date.map(|d| d.format("%Y%m%d").to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the table as CSV, replacing any previous file atomically.
pub fn export_daily_csv(table: &DailyPositionTable, path: &Path) -> Result<(), IngestError> {
    let mut buf = Vec::new();
    write_positions_csv(&table.records, &mut buf)
        .map_err(|e| IngestError::Csv { path: path.to_path_buf(), source: e })?;
    atomic_write(path, &buf).map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })
}

pub fn import_daily_csv(path: &Path, service_date: NaiveDate) -> Result<DailyPositionTable, IngestError> {
    let csv_err = |e| IngestError::Csv { path: path.to_path_buf(), source: e };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(IngestError::BadRow { path: path.to_path_buf(), line: 1, reason: "unexpected header".into() });
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| IngestError::BadRow { path: path.to_path_buf(), line, reason };
        let opt = |i: usize| Some(row[i].to_string()).filter(|s| !s.is_empty());
        let num = |i: usize| row[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", CSV_HEADER[i])));
        let position = GeoPoint::new(num(4)?, num(5)?).map_err(|e| bad(e.to_string()))?;
        records.push(VehiclePositionRecord {
            observed_at: EpochTimestamp(row[0].parse().map_err(|e| bad(format!("observed_at: {e}")))?),
            vehicle_id: row[1].to_string(),
            trip_id: opt(2),
            route_id: opt(3),
            position,
            start_date: match opt(6) {
                Some(d) => Some(NaiveDate::parse_from_str(&d, "%Y%m%d").map_err(|e| bad(format!("start_date: {e}")))?),
                None => None,
            },
        });
    }
    let n = records.len() as u64;
    let stats = IngestStats {
        snapshots_read: 0,
        raw_records: n,
        deduplicated_records: n,
        records_with_trip_id: records.iter().filter(|r| r.trip_id.is_some()).count() as u64,
        ..IngestStats::default()
    };
    Ok(DailyPositionTable { service_date, records, stats })
}
