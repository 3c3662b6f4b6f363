//! In-memory GTFS timetable snapshot: stops, routes, trips with ordered stop
//! times, and service calendars.
//!
//! Loading is lenient. Rows with unresolvable references or unusable values
//! are dropped and counted in [`LoadStats`]; only a missing required file or
//! an unreadable archive is fatal.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, Read, Seek};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::model::{GeoPoint, ScheduledStopTime, ScheduledTrip, ServiceTime, Stop};

#[derive(Debug, Error)]
pub enum GtfsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unreadable GTFS archive: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("GTFS archive lacks required file {0}")]
    MissingFile(&'static str),
    #[error("GTFS archive has neither calendar.txt nor calendar_dates.txt")]
    MissingCalendar,
    #[error("{file}: {source}")]
    Csv { file: &'static str, source: csv::Error },
    #[error("{file}: missing column {column}")]
    MissingColumn { file: &'static str, column: &'static str },
    #[error("unknown trip_id {0}")]
    UnknownTrip(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    pub agency_id: Option<String>,
    pub short_name: String,
    pub long_name: String,
    pub route_type: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agency {
    pub agency_id: Option<String>,
    pub name: String,
    pub url: String,
    pub timezone: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceCalendar {
    /// Monday first.
    pub weekdays: [bool; 7],
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceException {
    Added,
    Removed,
}

/// Counters for everything the loader dropped or adjusted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub stops: u64,
    pub routes: u64,
    pub trips: u64,
    pub stop_times: u64,
    pub stops_without_coordinates: u64,
    pub trips_unknown_route: u64,
    pub trips_duplicate_id: u64,
    pub trips_frequency_based: u64,
    pub trips_without_stop_times: u64,
    pub trips_non_monotonic: u64,
    pub stop_times_unknown_trip: u64,
    pub stop_times_unknown_stop: u64,
    pub stop_times_unusable: u64,
    pub stop_times_departure_before_arrival: u64,
    pub calendar_rows_unusable: u64,
    pub calendar_date_rows_unusable: u64,
}

impl LoadStats {
    pub fn dropped_rows(&self) -> u64 {
        self.stops_without_coordinates
            + self.trips_unknown_route
            + self.trips_duplicate_id
            + self.trips_frequency_based
            + self.trips_without_stop_times
            + self.trips_non_monotonic
            + self.stop_times_unknown_trip
            + self.stop_times_unknown_stop
            + self.stop_times_unusable
            + self.calendar_rows_unusable
            + self.calendar_date_rows_unusable
    }
}

/// A stop of a trip, in trip order, with its coordinates resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteStop<'a> {
    pub stop: &'a Stop,
    pub stop_sequence: u32,
}

#[derive(Debug, Clone)]
pub struct TimetableSnapshot {
    pub snapshot_date: NaiveDate,
    pub trips_by_id: HashMap<String, Arc<ScheduledTrip>>,
    pub stops_by_id: HashMap<String, Stop>,
    pub routes_by_id: HashMap<String, Route>,
    pub agencies: Vec<Agency>,
    pub calendars: HashMap<String, ServiceCalendar>,
    pub exceptions: HashMap<String, Vec<(NaiveDate, ServiceException)>>,
    pub stats: LoadStats,
}

impl TimetableSnapshot {
    pub fn trip(&self, trip_id: &str) -> Option<&Arc<ScheduledTrip>> {
        self.trips_by_id.get(trip_id)
    }

    /// Calendar weekday range, then `calendar_dates` exceptions on top.
    pub fn service_active_on(&self, service_id: &str, date: NaiveDate) -> bool {
        if let Some(ex) = self.exceptions.get(service_id) {
            if let Some((_, kind)) = ex.iter().find(|(d, _)| *d == date) {
                return *kind == ServiceException::Added;
            }
        }
        self.calendars.get(service_id).is_some_and(|c| {
            c.start <= date && date <= c.end && c.weekdays[date.weekday().num_days_from_monday() as usize]
        })
    }

    pub fn trip_active_on(&self, trip_id: &str, date: NaiveDate) -> Result<bool, GtfsError> {
        let trip = self.trip(trip_id).ok_or_else(|| GtfsError::UnknownTrip(trip_id.to_string()))?;
        Ok(self.service_active_on(&trip.service_id, date))
    }

    pub fn active_service_ids(&self, date: NaiveDate) -> BTreeSet<String> {
        self.calendars
            .keys()
            .chain(self.exceptions.keys())
            .filter(|s| self.service_active_on(s, date))
            .cloned()
            .collect()
    }

    /// The trip's stops in order. Stop ids missing from the snapshot are
    /// skipped and counted in the second value.
    pub fn route_stops<'a>(&'a self, trip: &ScheduledTrip) -> (Vec<RouteStop<'a>>, usize) {
        let mut missing = 0;
        let stops = trip
            .stop_times
            .iter()
            .filter_map(|st| match self.stops_by_id.get(&st.stop_id) {
                Some(stop) => Some(RouteStop { stop, stop_sequence: st.stop_sequence }),
                None => {
                    missing += 1;
                    None
                }
            })
            .collect();
        (stops, missing)
    }
}

/// Column lookup over one CSV table.
pub(crate) struct Table {
    file: &'static str,
    index: HashMap<String, usize>,
    pub(crate) rows: Vec<csv::StringRecord>,
}

impl Table {
    pub(crate) fn parse(file: &'static str, bytes: &[u8]) -> Result<Self, GtfsError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
        let headers = rdr.headers().map_err(|e| GtfsError::Csv { file, source: e })?.clone();
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim_start_matches('\u{feff}').trim().to_string(), i))
            .collect();
        let rows = rdr
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GtfsError::Csv { file, source: e })?;
        Ok(Self { file, index, rows })
    }

    pub(crate) fn col(&self, name: &'static str) -> Result<usize, GtfsError> {
        self.index.get(name).copied().ok_or(GtfsError::MissingColumn { file: self.file, column: name })
    }

    pub(crate) fn opt_col(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

pub(crate) fn field(row: &csv::StringRecord, col: usize) -> &str {
    row.get(col).unwrap_or("").trim()
}

fn opt_field(row: &csv::StringRecord, col: Option<usize>) -> Option<String> {
    col.map(|c| field(row, c)).filter(|s| !s.is_empty()).map(str::to_string)
}

pub(crate) fn parse_gtfs_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y%m%d").ok()
}

fn read_entry<R: Read + Seek>(zip: &mut zip::ZipArchive<R>, name: &str) -> Result<Option<Vec<u8>>, GtfsError> {
    // some publishers nest the tables in a top-level folder
    let found = (0..zip.len()).find(|&i| {
        zip.name_for_index(i)
            .is_some_and(|n| n == name || n.rsplit('/').next() == Some(name))
    });
    let Some(i) = found else { return Ok(None) };
    let mut f = zip.by_index(i)?;
    let mut buf = Vec::with_capacity(f.size() as usize);
    f.read_to_end(&mut buf).map_err(|e| GtfsError::Io { path: name.into(), source: e })?;
    Ok(Some(buf))
}

pub(crate) fn required<R: Read + Seek>(zip: &mut zip::ZipArchive<R>, file: &'static str) -> Result<Table, GtfsError> {
    let bytes = read_entry(zip, file)?.ok_or(GtfsError::MissingFile(file))?;
    Table::parse(file, &bytes)
}

pub(crate) fn optional<R: Read + Seek>(zip: &mut zip::ZipArchive<R>, file: &'static str) -> Result<Option<Table>, GtfsError> {
    read_entry(zip, file)?.map(|b| Table::parse(file, &b)).transpose()
}

pub fn load_timetable(zip_path: &Path, snapshot_date: NaiveDate) -> Result<TimetableSnapshot, GtfsError> {
    let file = File::open(zip_path).map_err(|e| GtfsError::Io { path: zip_path.to_path_buf(), source: e })?;
    load_timetable_from_reader(io::BufReader::new(file), snapshot_date)
}

pub fn load_timetable_from_bytes(bytes: &[u8], snapshot_date: NaiveDate) -> Result<TimetableSnapshot, GtfsError> {
    load_timetable_from_reader(io::Cursor::new(bytes), snapshot_date)
}

pub fn load_timetable_from_reader<R: Read + Seek>(
    reader: R,
    snapshot_date: NaiveDate,
) -> Result<TimetableSnapshot, GtfsError> {
    let mut zip = zip::ZipArchive::new(reader)?;
    let stops_t = required(&mut zip, "stops.txt")?;
    let routes_t = required(&mut zip, "routes.txt")?;
    let trips_t = required(&mut zip, "trips.txt")?;
    let stop_times_t = required(&mut zip, "stop_times.txt")?;
    let calendar_t = optional(&mut zip, "calendar.txt")?;
    let calendar_dates_t = optional(&mut zip, "calendar_dates.txt")?;
    if calendar_t.is_none() && calendar_dates_t.is_none() {
        return Err(GtfsError::MissingCalendar);
    }
    let agency_t = optional(&mut zip, "agency.txt")?;
    let frequencies_t = optional(&mut zip, "frequencies.txt")?;

    let mut stats = LoadStats::default();

    let stops_by_id = load_stops(&stops_t, &mut stats)?;
    let routes_by_id = load_routes(&routes_t)?;
    stats.routes = routes_by_id.len() as u64;
    let agencies = agency_t.as_ref().map(load_agencies).transpose()?.unwrap_or_default();

    let mut frequency_trips = HashSet::new();
    if let Some(t) = &frequencies_t {
        let c = t.col("trip_id")?;
        frequency_trips.extend(t.rows.iter().map(|r| field(r, c).to_string()));
    }

    let trips_by_id = load_trips(&trips_t, &stop_times_t, &stops_by_id, &routes_by_id, &frequency_trips, &mut stats)?;

    let calendars = match &calendar_t {
        Some(t) => load_calendar(t, &mut stats)?,
        None => HashMap::new(),
    };
    let exceptions = match &calendar_dates_t {
        Some(t) => load_calendar_dates(t, &mut stats)?,
        None => HashMap::new(),
    };

    debug!(date = %snapshot_date, ?stats, "loaded timetable");
    Ok(TimetableSnapshot {
        snapshot_date,
        trips_by_id,
        stops_by_id,
        routes_by_id,
        agencies,
        calendars,
        exceptions,
        stats,
    })
}

fn load_stops(t: &Table, stats: &mut LoadStats) -> Result<HashMap<String, Stop>, GtfsError> {
    let (id, lat, lon) = (t.col("stop_id")?, t.col("stop_lat")?, t.col("stop_lon")?);
    let name = t.opt_col("stop_name");
    let mut out = HashMap::with_capacity(t.rows.len());
    for row in &t.rows {
        let location = field(row, lat)
            .parse()
            .ok()
            .zip(field(row, lon).parse().ok())
            .and_then(|(la, lo)| GeoPoint::new(la, lo).ok());
        let stop_id = field(row, id);
        match location {
            Some(location) if !stop_id.is_empty() => {
                out.entry(stop_id.to_string()).or_insert_with(|| Stop {
                    stop_id: stop_id.to_string(),
                    name: opt_field(row, name).unwrap_or_default(),
                    location,
                });
            }
            _ => stats.stops_without_coordinates += 1,
        }
    }
    stats.stops = out.len() as u64;
    Ok(out)
}

fn load_routes(t: &Table) -> Result<HashMap<String, Route>, GtfsError> {
    let id = t.col("route_id")?;
    let (agency, short, long, ty) = (
        t.opt_col("agency_id"),
        t.opt_col("route_short_name"),
        t.opt_col("route_long_name"),
        t.opt_col("route_type"),
    );
    let mut out = HashMap::with_capacity(t.rows.len());
    for row in &t.rows {
        let route_id = field(row, id).to_string();
        out.entry(route_id.clone()).or_insert_with(|| Route {
            route_id,
            agency_id: opt_field(row, agency),
            short_name: opt_field(row, short).unwrap_or_default(),
            long_name: opt_field(row, long).unwrap_or_default(),
            route_type: opt_field(row, ty).and_then(|s| s.parse().ok()).unwrap_or(3),
        });
    }
    Ok(out)
}

fn load_agencies(t: &Table) -> Result<Vec<Agency>, GtfsError> {
    let (id, name, url, tz) = (
        t.opt_col("agency_id"),
        t.opt_col("agency_name"),
        t.opt_col("agency_url"),
        t.opt_col("agency_timezone"),
    );
    Ok(t.rows
        .iter()
        .map(|row| Agency {
            agency_id: opt_field(row, id),
            name: opt_field(row, name).unwrap_or_default(),
            url: opt_field(row, url).unwrap_or_default(),
            timezone: opt_field(row, tz).unwrap_or_default(),
        })
        .collect())
}

fn load_trips(
    trips_t: &Table,
    stop_times_t: &Table,
    stops: &HashMap<String, Stop>,
    routes: &HashMap<String, Route>,
    frequency_trips: &HashSet<String>,
    stats: &mut LoadStats,
) -> Result<HashMap<String, Arc<ScheduledTrip>>, GtfsError> {
    let (tid, rid, sid) = (trips_t.col("trip_id")?, trips_t.col("route_id")?, trips_t.col("service_id")?);
    let (shape, headsign, dir) = (
        trips_t.opt_col("shape_id"),
        trips_t.opt_col("trip_headsign"),
        trips_t.opt_col("direction_id"),
    );
    let mut trips: HashMap<String, ScheduledTrip> = HashMap::with_capacity(trips_t.rows.len());
    for row in &trips_t.rows {
        let trip_id = field(row, tid);
        if frequency_trips.contains(trip_id) {
            stats.trips_frequency_based += 1;
            continue;
        }
        let route_id = field(row, rid);
        if !routes.contains_key(route_id) {
            stats.trips_unknown_route += 1;
            continue;
        }
        if trips.contains_key(trip_id) {
            stats.trips_duplicate_id += 1;
            continue;
        }
        trips.insert(
            trip_id.to_string(),
            ScheduledTrip {
                trip_id: trip_id.to_string(),
                route_id: route_id.to_string(),
                service_id: field(row, sid).to_string(),
                shape_id: opt_field(row, shape),
                headsign: opt_field(row, headsign),
                direction_id: opt_field(row, dir).and_then(|s| s.parse().ok()),
                stop_times: Vec::new(),
            },
        );
    }

    let st = stop_times_t;
    let (tid, arr, dep, stop, seq) = (
        st.col("trip_id")?,
        st.col("arrival_time")?,
        st.col("departure_time")?,
        st.col("stop_id")?,
        st.col("stop_sequence")?,
    );
    for row in &st.rows {
        let Some(trip) = trips.get_mut(field(row, tid)) else {
            stats.stop_times_unknown_trip += 1;
            continue;
        };
        let stop_id = field(row, stop);
        if !stops.contains_key(stop_id) {
            stats.stop_times_unknown_stop += 1;
            continue;
        }
        let arrival = field(row, arr).parse::<ServiceTime>().ok();
        let departure = field(row, dep).parse::<ServiceTime>().ok();
        let (arrival, mut departure) = match (arrival, departure) {
            (Some(a), Some(d)) => (a, d),
            (Some(a), None) => (a, a),
            (None, Some(d)) => (d, d),
            (None, None) => {
                stats.stop_times_unusable += 1;
                continue;
            }
        };
        let Ok(stop_sequence) = field(row, seq).parse::<u32>() else {
            stats.stop_times_unusable += 1;
            continue;
        };
        if departure < arrival {
            stats.stop_times_departure_before_arrival += 1;
            departure = arrival;
        }
        trip.stop_times.push(ScheduledStopTime {
            trip_id: trip.trip_id.clone(),
            stop_id: stop_id.to_string(),
            stop_sequence,
            arrival,
            departure,
        });
    }

    let mut out = HashMap::with_capacity(trips.len());
    for (id, mut trip) in trips {
        if trip.stop_times.is_empty() {
            stats.trips_without_stop_times += 1;
            continue;
        }
        trip.stop_times.sort_by_key(|s| s.stop_sequence);
        let ordered = trip
            .stop_times
            .windows(2)
            .all(|w| w[0].stop_sequence < w[1].stop_sequence && w[0].arrival <= w[1].arrival);
        if !ordered {
            stats.trips_non_monotonic += 1;
            continue;
        }
        stats.stop_times += trip.stop_times.len() as u64;
        out.insert(id, Arc::new(trip));
    }
    stats.trips = out.len() as u64;
    Ok(out)
}

fn load_calendar(t: &Table, stats: &mut LoadStats) -> Result<HashMap<String, ServiceCalendar>, GtfsError> {
    const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
    let sid = t.col("service_id")?;
    let (start, end) = (t.col("start_date")?, t.col("end_date")?);
    let mut day_cols = [0usize; 7];
    for (slot, name) in day_cols.iter_mut().zip(DAYS) {
        *slot = t.index.get(name).copied().ok_or(GtfsError::MissingColumn { file: t.file, column: name })?;
    }
    let mut out = HashMap::new();
    for row in &t.rows {
        let (Some(s), Some(e)) = (parse_gtfs_date(field(row, start)), parse_gtfs_date(field(row, end))) else {
            stats.calendar_rows_unusable += 1;
            continue;
        };
        let mut weekdays = [false; 7];
        for (w, c) in weekdays.iter_mut().zip(day_cols) {
            *w = field(row, c) == "1";
        }
        out.insert(field(row, sid).to_string(), ServiceCalendar { weekdays, start: s, end: e });
    }
    Ok(out)
}

fn load_calendar_dates(
    t: &Table,
    stats: &mut LoadStats,
) -> Result<HashMap<String, Vec<(NaiveDate, ServiceException)>>, GtfsError> {
    let (sid, date, ty) = (t.col("service_id")?, t.col("date")?, t.col("exception_type")?);
    let mut out: HashMap<String, Vec<_>> = HashMap::new();
    for row in &t.rows {
        let kind = match field(row, ty) {
            "1" => ServiceException::Added,
            "2" => ServiceException::Removed,
            _ => {
                stats.calendar_date_rows_unusable += 1;
                continue;
            }
        };
        let Some(d) = parse_gtfs_date(field(row, date)) else {
            stats.calendar_date_rows_unusable += 1;
            continue;
        };
        out.entry(field(row, sid).to_string()).or_default().push((d, kind));
    }
    Ok(out)
}
