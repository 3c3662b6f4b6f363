//! Links vehicle observations to scheduled trips through their `trip_id`,
//! looking in the target day's timetable first and then in timetables from
//! neighbouring days, nearest day first.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::archive::timetable_path;
use crate::gtfs::{load_timetable, GtfsError, TimetableSnapshot};
use crate::model::{ScheduledTrip, VehiclePositionRecord};

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("no timetable archived for target date {date} ({path})")]
    MissingTarget { date: NaiveDate, path: PathBuf },
    #[error("target timetable {date} failed to load: {source}")]
    TargetLoad { date: NaiveDate, source: GtfsError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    ResolvedSameDay,
    ResolvedWindow,
    NoTripId,
    UnknownTripId,
}

impl ResolutionStatus {
    pub fn is_resolved(self) -> bool {
        matches!(self, Self::ResolvedSameDay | Self::ResolvedWindow)
    }
}

#[derive(Debug, Clone)]
pub struct ResolutionOutcome {
    pub trip: Option<Arc<ScheduledTrip>>,
    pub source: Option<Arc<TimetableSnapshot>>,
    pub status: ResolutionStatus,
}

impl ResolutionOutcome {
    fn unresolved(status: ResolutionStatus) -> Self {
        Self { trip: None, source: None, status }
    }

    pub fn source_snapshot_date(&self) -> Option<NaiveDate> {
        self.source.as_ref().map(|s| s.snapshot_date)
    }
}

/// Per-record resolution counts for one day.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionStats {
    pub resolved_same_day: u64,
    pub resolved_window: u64,
    pub no_trip_id: u64,
    pub unknown_trip_id: u64,
    /// Records whose trip_id was in the target timetable but whose service
    /// does not run on the target date (a subset of the other counters).
    pub same_day_inactive: u64,
    pub missing_window_days: u64,
}

impl ResolutionStats {
    pub fn add(&mut self, status: ResolutionStatus, n: u64) {
        match status {
            ResolutionStatus::ResolvedSameDay => self.resolved_same_day += n,
            ResolutionStatus::ResolvedWindow => self.resolved_window += n,
            ResolutionStatus::NoTripId => self.no_trip_id += n,
            ResolutionStatus::UnknownTripId => self.unknown_trip_id += n,
        }
    }

    pub fn resolved(&self) -> u64 {
        self.resolved_same_day + self.resolved_window
    }

    pub fn total(&self) -> u64 {
        self.resolved() + self.no_trip_id + self.unknown_trip_id
    }

    /// resolved / (resolved + unknown + no trip_id); `None` for an empty day.
    pub fn resolution_rate(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.resolved() as f64 / total as f64)
    }
}

/// Day offsets in probe order: 0, -1, +1, -2, +2, ... bounded on each side.
pub fn probe_order(days_before: u32, days_after: u32) -> Vec<i64> {
    let mut out = vec![0];
    for k in 1..=days_before.max(days_after) as i64 {
        if k <= days_before as i64 {
            out.push(-k);
        }
        if k <= days_after as i64 {
            out.push(k);
        }
    }
    out
}

fn offset_date(date: NaiveDate, offset: i64) -> Option<NaiveDate> {
    if offset >= 0 {
        date.checked_add_days(Days::new(offset as u64))
    } else {
        date.checked_sub_days(Days::new(offset.unsigned_abs()))
    }
}

type Loader = dyn Fn(NaiveDate) -> Option<TimetableSnapshot> + Send + Sync;

struct Slot {
    offset: i64,
    date: NaiveDate,
    cell: OnceLock<Option<Arc<TimetableSnapshot>>>,
}

/// Timetables around a target date. Offset days are loaded on first need,
/// at most once each, even under concurrent resolution.
pub struct ResolutionWindow {
    target_date: NaiveDate,
    days_before: u32,
    days_after: u32,
    slots: Vec<Slot>,
    loader: Box<Loader>,
}

impl std::fmt::Debug for ResolutionWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResolutionWindow")
            .field("target_date", &self.target_date)
            .field("days_before", &self.days_before)
            .field("days_after", &self.days_after)
            .field("loaded", &self.loaded_dates())
            .finish()
    }
}

impl ResolutionWindow {
    fn with_loader(target: Arc<TimetableSnapshot>, days_before: u32, days_after: u32, loader: Box<Loader>) -> Self {
        let target_date = target.snapshot_date;
        let slots = probe_order(days_before, days_after)
            .into_iter()
            .filter_map(|offset| {
                let date = offset_date(target_date, offset)?;
                let cell = OnceLock::new();
                if offset == 0 {
                    let _ = cell.set(Some(target.clone()));
                }
                Some(Slot { offset, date, cell })
            })
            .collect();
        Self { target_date, days_before, days_after, slots, loader }
    }

    /// Builds a window over in-memory snapshots; dates without a snapshot
    /// count as missing archive days.
    pub fn from_snapshots(
        target: TimetableSnapshot,
        days_before: u32,
        days_after: u32,
        others: Vec<TimetableSnapshot>,
    ) -> Self {
        let mut by_date: HashMap<NaiveDate, TimetableSnapshot> =
            others.into_iter().map(|s| (s.snapshot_date, s)).collect();
        by_date.remove(&target.snapshot_date);
        let by_date = std::sync::Mutex::new(by_date);
        Self::with_loader(
            Arc::new(target),
            days_before,
            days_after,
            Box::new(move |d| by_date.lock().unwrap().remove(&d)),
        )
    }

    pub fn target_date(&self) -> NaiveDate {
        self.target_date
    }

    pub fn target(&self) -> &Arc<TimetableSnapshot> {
        self.slots[0].cell.get().and_then(Option::as_ref).expect("target snapshot is always loaded")
    }

    pub fn probe_dates(&self) -> Vec<NaiveDate> {
        self.slots.iter().map(|s| s.date).collect()
    }

    fn snapshot_at<'a>(&'a self, slot: &'a Slot) -> Option<&'a Arc<TimetableSnapshot>> {
        slot.cell
            .get_or_init(|| {
                let snap = (self.loader)(slot.date).map(Arc::new);
                debug!(date = %slot.date, offset = slot.offset, loaded = snap.is_some(), "window snapshot");
                snap
            })
            .as_ref()
    }

    /// Dates loaded so far, in probe order.
    pub fn loaded_dates(&self) -> Vec<NaiveDate> {
        self.slots
            .iter()
            .filter(|s| matches!(s.cell.get(), Some(Some(_))))
            .map(|s| s.date)
            .collect()
    }

    /// Probed days whose timetable was absent or unreadable.
    pub fn missing_days(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s.cell.get(), Some(None))).count()
    }

    /// Every loaded snapshot, in probe order.
    pub fn loaded_snapshots(&self) -> Vec<Arc<TimetableSnapshot>> {
        self.slots.iter().filter_map(|s| s.cell.get().cloned().flatten()).collect()
    }

    pub fn resolve(&self, record: &VehiclePositionRecord) -> ResolutionOutcome {
        self.resolve_trip_id(record.trip_id.as_deref())
    }

    pub fn resolve_trip_id(&self, trip_id: Option<&str>) -> ResolutionOutcome {
        let Some(trip_id) = trip_id else {
            return ResolutionOutcome::unresolved(ResolutionStatus::NoTripId);
        };
        for slot in &self.slots {
            let Some(snap) = self.snapshot_at(slot) else { continue };
            let Some(trip) = snap.trip(trip_id) else { continue };
            if slot.offset == 0 {
                if snap.service_active_on(&trip.service_id, self.target_date) {
                    return ResolutionOutcome {
                        trip: Some(trip.clone()),
                        source: Some(snap.clone()),
                        status: ResolutionStatus::ResolvedSameDay,
                    };
                }
                continue;
            }
            return ResolutionOutcome {
                trip: Some(trip.clone()),
                source: Some(snap.clone()),
                status: ResolutionStatus::ResolvedWindow,
            };
        }
        ResolutionOutcome::unresolved(ResolutionStatus::UnknownTripId)
    }

    /// True when the trip_id exists in the target timetable but its service
    /// does not run on the target date.
    pub fn inactive_same_day(&self, trip_id: &str) -> bool {
        let t = self.target();
        t.trip(trip_id).is_some_and(|trip| !t.service_active_on(&trip.service_id, self.target_date))
    }
}

/// Opens the window over `<archive_root>/gtfs/<date>.zip` files. The target
/// timetable is loaded now and must exist; other days load on first miss.
pub fn build_window(
    archive_root: impl Into<PathBuf>,
    target_date: NaiveDate,
    days_before: u32,
    days_after: u32,
) -> Result<ResolutionWindow, ResolveError> {
    let root: PathBuf = archive_root.into();
    let path = timetable_path(&root, target_date);
    if !path.exists() {
        return Err(ResolveError::MissingTarget { date: target_date, path });
    }
    let target = load_timetable(&path, target_date)
        .map_err(|source| ResolveError::TargetLoad { date: target_date, source })?;
    let loader = move |date: NaiveDate| {
        let path = timetable_path(&root, date);
        if !path.exists() {
            return None;
        }
        match load_timetable(&path, date) {
            Ok(s) => Some(s),
            Err(e) => {
                warn!(date = %date, error = %e, "window timetable unreadable; treated as missing");
                None
            }
        }
    };
    Ok(ResolutionWindow::with_loader(Arc::new(target), days_before, days_after, Box::new(loader)))
}
