//! Summary statistics over travel times or delays, and stop-level delays
//! read off a corrected bundle.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::archive::timetable_path;
use crate::gtfs::{load_timetable, TimetableSnapshot};
use crate::inference::Provenance;
use crate::model::ScheduledTrip;
use crate::writer::ReadBundle;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no values to summarize")]
    EmptyInput,
    #[error("line {line}: {reason}")]
    BadRow { line: u64, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub minimum: f64,
    pub median: f64,
    pub p85: f64,
}

/// Quantile of sorted `values` by linear interpolation between the closest
/// ranks, at zero-based position `q·(n−1)`.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        count: values.len(),
        mean,
        std_dev: var.sqrt(),
        minimum: sorted[0],
        median: quantile(&sorted, 0.5).unwrap(),
        p85: quantile(&sorted, 0.85).unwrap(),
    })
}

/// Reads `group_key,value_seconds` rows (with header) into per-group values.
pub fn read_grouped_values<R: io::Read>(input: R) -> Result<BTreeMap<String, Vec<f64>>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i as u64 + 2;
        let (Some(key), Some(value)) = (row.get(0), row.get(1)) else {
            return Err(MetricsError::BadRow { line, reason: "expected group_key,value_seconds".into() });
        };
        let value: f64 = value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| MetricsError::BadRow { line, reason: format!("bad value {value:?}") })?;
        groups.entry(key.to_string()).or_default().push(value);
    }
    Ok(groups)
}

pub fn summarize_groups(groups: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, SummaryStats> {
    groups
        .par_iter()
        .filter_map(|(k, v)| summarize(v).ok().map(|s| (k.clone(), s)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDelayRecord {
    pub trip_id: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub service_date: NaiveDate,
    /// Corrected minus scheduled arrival, seconds.
    pub delay: i64,
}

/// Where the original schedule of a corrected trip is looked up.
pub trait ScheduleSource {
    fn scheduled_trip(&self, snapshot_date: NaiveDate, trip_id: &str) -> Option<Arc<ScheduledTrip>>;
}

impl ScheduleSource for HashMap<NaiveDate, Arc<TimetableSnapshot>> {
    fn scheduled_trip(&self, snapshot_date: NaiveDate, trip_id: &str) -> Option<Arc<ScheduledTrip>> {
        self.get(&snapshot_date)?.trip(trip_id).cloned()
    }
}

/// Timetables from an archive, each loaded on first use.
pub struct ArchiveSchedule {
    root: PathBuf,
    cache: Mutex<HashMap<NaiveDate, Option<Arc<TimetableSnapshot>>>>,
}

impl ArchiveSchedule {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), cache: Mutex::default() }
    }
}

impl ScheduleSource for ArchiveSchedule {
    fn scheduled_trip(&self, snapshot_date: NaiveDate, trip_id: &str) -> Option<Arc<ScheduledTrip>> {
        let mut cache = self.cache.lock().unwrap();
        let snap = cache.entry(snapshot_date).or_insert_with(|| {
            let path = timetable_path(&self.root, snapshot_date);
            load_timetable(&path, snapshot_date)
                .map_err(|e| warn!(date = %snapshot_date, error = %e, "schedule snapshot unavailable"))
                .ok()
                .map(Arc::new)
        });
        snap.as_ref()?.trip(trip_id).cloned()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DelayTable {
    /// Sorted by trip_id then stop_sequence.
    pub records: Vec<StopDelayRecord>,
    pub trips_skipped: usize,
}

/// One record per matched stop time in `bundle`; interpolated and
/// extrapolated times are left out.
pub fn delay_table(bundle: &ReadBundle, schedule: &dyn ScheduleSource) -> DelayTable {
    let service_date = bundle.service_date.unwrap_or(bundle.timetable.snapshot_date);
    let mut trip_ids: Vec<&String> = bundle.timetable.trips_by_id.keys().collect();
    trip_ids.sort();
    let mut out = DelayTable::default();
    for trip_id in trip_ids {
        let corrected = &bundle.timetable.trips_by_id[trip_id];
        let source_date = bundle.source_dates.get(trip_id).copied().unwrap_or(service_date);
        let Some(scheduled) = schedule.scheduled_trip(source_date, trip_id) else {
            warn!(trip_id = %trip_id, source_date = %source_date, "no schedule for corrected trip; skipped");
            out.trips_skipped += 1;
            continue;
        };
        for st in &corrected.stop_times {
            let key = (trip_id.clone(), st.stop_sequence);
            if bundle.provenance.get(&key) != Some(&Provenance::Matched) {
                continue;
            }
            let Some(planned) = scheduled.stop_time(st.stop_sequence) else { continue };
            out.records.push(StopDelayRecord {
                trip_id: trip_id.clone(),
                stop_id: st.stop_id.clone(),
                stop_sequence: st.stop_sequence,
                service_date,
                delay: st.arrival.0 as i64 - planned.arrival.0 as i64,
            });
        }
    }
    out
}

pub fn write_delays_csv<W: io::Write>(records: &[StopDelayRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trip_id", "stop_id", "stop_sequence", "service_date", "delay_seconds"])?;
    for r in records {
        w.write_record([
            r.trip_id.as_str(),
            r.stop_id.as_str(),
            &r.stop_sequence.to_string(),
            &r.service_date.format("%Y-%m-%d").to_string(),
            &r.delay.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
