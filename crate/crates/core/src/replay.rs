//! Synthetic archives for testing: a GTFS timetable of straight-line routes
//! and a GTFS-RT vehicle position stream of buses running them under a
//! known delay function, with the ground truth alongside.

use std::collections::BTreeMap;
use std::io::{self, Cursor, Write};
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use chrono_tz::Tz;
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use crate::archive::{rt_snapshot_path, timetable_path};
use crate::geo::EARTH_RADIUS_M;
use crate::gtfs_rt::{
    FeedEntity, FeedHeader, FeedMessage, Position, TripDescriptor, VehicleDescriptor, VehiclePosition,
};
use crate::inference::service_day_origin;
use crate::model::{EpochTimestamp, ServiceTime};
use crate::util::atomic_write;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid replay settings: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Zip(#[from] zip::result::ZipError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Delay at stop_sequence `s` is `base_s + per_stop_s · s` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayModel {
    pub base_s: i64,
    pub per_stop_s: i64,
}

impl DelayModel {
    pub const ZERO: Self = Self { base_s: 0, per_stop_s: 0 };

    pub fn at(&self, stop_sequence: u32) -> i64 {
        self.base_s + self.per_stop_s * stop_sequence as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// One position per stop, at the stop, at the (delayed) arrival time.
    AtStops,
    /// A position every `interval_s` seconds along the route, moving at
    /// constant speed between stops; the first sample falls at a random
    /// phase after the first stop.
    Periodic { interval_s: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub seed: u64,
    pub service_date: NaiveDate,
    pub timezone: Tz,
    pub routes: usize,
    pub stops_per_route: usize,
    /// Spread round-robin over the routes.
    pub trips: usize,
    pub stop_spacing_m: f64,
    /// Scheduled running time between consecutive stops.
    pub stop_gap_s: u32,
    pub first_departure: ServiceTime,
    /// Departure spacing between successive trips of one route.
    pub headway_s: u32,
    pub delay: DelayModel,
    pub sampling: Sampling,
    /// Probability that a stop of a trip goes unobserved.
    pub dropout: f64,
    /// Snapshot files hold the positions of this many seconds each.
    pub snapshot_interval_s: u32,
    /// Share of trips listed only in the next day's timetable.
    pub window_only_share: f64,
    /// Repeat every record in the following snapshot too.
    pub duplicate_records: bool,
    /// Share of snapshot files replaced by undecodable bytes.
    pub corrupt_share: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            service_date: NaiveDate::from_ymd_opt(2025, 7, 8).expect("valid date"),
            timezone: chrono_tz::Europe::London,
            routes: 10,
            stops_per_route: 30,
            trips: 100,
            stop_spacing_m: 400.0,
            stop_gap_s: 60,
            first_departure: ServiceTime::from_hms(6, 0, 0),
            headway_s: 600,
            delay: DelayModel::ZERO,
            sampling: Sampling::AtStops,
            dropout: 0.0,
            snapshot_interval_s: 30,
            window_only_share: 0.0,
            duplicate_records: false,
            corrupt_share: 0.0,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::Config(m.to_string()));
        if self.routes == 0 || self.stops_per_route < 2 {
            return bad("need at least one route of two stops");
        }
        if self.stop_spacing_m <= 0.0 || self.stop_gap_s == 0 || self.snapshot_interval_s == 0 {
            return bad("spacing, stop gap and snapshot interval must be positive");
        }
        if let Sampling::Periodic { interval_s: 0 } = self.sampling {
            return bad("sampling interval must be positive");
        }
        for (name, p) in [("dropout", self.dropout), ("window_only_share", self.window_only_share), ("corrupt_share", self.corrupt_share)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ReplayError::Config(format!("{name} must be within [0, 1]")));
            }
        }
        if self.delay.at(1) < -(self.first_departure.0 as i64) {
            return bad("delay would move trips before midnight");
        }
        Ok(())
    }
}

/// What actually happened at one stop of one synthetic trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub trip_id: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub scheduled: ServiceTime,
    pub actual: ServiceTime,
    /// No positions were emitted near this stop.
    pub dropped: bool,
    /// The trip appears only in the next day's timetable.
    pub window_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub timetables: Vec<PathBuf>,
    pub snapshots: usize,
    pub corrupt_snapshots: usize,
    /// Position records written, counting repeats.
    pub records: usize,
    pub truth: Vec<TruthRow>,
}

struct SynthStop {
    id: String,
    lat: f64,
    lon: f64,
}

struct SynthTrip {
    id: String,
    route: usize,
    departure: u32,
    window_only: bool,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6 + 0.0
}

fn layout(cfg: &ReplayConfig) -> Vec<Vec<SynthStop>> {
    (0..cfg.routes)
        .map(|r| {
            // routes laid out on a grid of parallel east-west lines
            let lat0 = 51.0 + (r % 50) as f64 * 0.01;
            let lon0 = -1.0 + (r / 50) as f64 * 0.2;
            let dlon = (cfg.stop_spacing_m / (EARTH_RADIUS_M * lat0.to_radians().cos())).to_degrees();
            (0..cfg.stops_per_route)
                .map(|i| SynthStop {
                    id: format!("R{r}S{}", i + 1),
                    lat: round6(lat0),
                    lon: round6(lon0 + i as f64 * dlon),
                })
                .collect()
        })
        .collect()
}

fn plan_trips(cfg: &ReplayConfig) -> Vec<SynthTrip> {
    (0..cfg.trips)
        .map(|k| {
            let share = cfg.window_only_share;
            SynthTrip {
                id: format!("T{k:06}"),
                route: k % cfg.routes,
                departure: cfg.first_departure.0 + (k / cfg.routes) as u32 * cfg.headway_s,
                // exactly floor(n·share) trips are picked, evenly spread
                window_only: ((k + 1) as f64 * share).floor() > (k as f64 * share).floor(),
            }
        })
        .collect()
}

fn deterministic_zip(files: &[(&str, Vec<u8>)]) -> Result<Vec<u8>, ReplayError> {
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    for (name, body) in files {
        zip.start_file(*name, options)?;
        zip.write_all(body).map_err(|e| ReplayError::Io { path: (*name).into(), source: e })?;
    }
    Ok(zip.finish()?.into_inner())
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, ReplayError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| ReplayError::Csv(e.into_error().into()))
}

fn timetable_zip(cfg: &ReplayConfig, stops: &[Vec<SynthStop>], trips: &[&SynthTrip], date: NaiveDate) -> Result<Vec<u8>, ReplayError> {
    let agency = csv_table(
        &["agency_id", "agency_name", "agency_url", "agency_timezone"],
        [vec!["SYN".into(), "Synthetic Buses".into(), "https://example.invalid/".into(), cfg.timezone.name().into()]],
    )?;
    let stops_t = csv_table(
        &["stop_id", "stop_name", "stop_lat", "stop_lon"],
        stops.iter().flatten().map(|s| vec![s.id.clone(), format!("Stop {}", s.id), format!("{:.6}", s.lat), format!("{:.6}", s.lon)]),
    )?;
    let routes = csv_table(
        &["route_id", "agency_id", "route_short_name", "route_long_name", "route_type"],
        (0..cfg.routes).map(|r| vec![format!("R{r}"), "SYN".into(), r.to_string(), format!("Route {r}"), "3".into()]),
    )?;
    let trips_t = csv_table(
        &["route_id", "service_id", "trip_id", "direction_id"],
        trips.iter().map(|t| vec![format!("R{}", t.route), "SVC".into(), t.id.clone(), "0".into()]),
    )?;
    let stop_times = csv_table(
        &["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"],
        trips.iter().flat_map(|t| {
            stops[t.route].iter().enumerate().map(move |(i, s)| {
                let time = ServiceTime(t.departure + i as u32 * cfg.stop_gap_s).to_string();
                vec![t.id.clone(), time.clone(), time, s.id.clone(), (i + 1).to_string()]
            })
        }),
    )?;
    let calendar_dates = csv_table(
        &["service_id", "date", "exception_type"],
        [vec!["SVC".into(), date.format("%Y%m%d").to_string(), "1".into()]],
    )?;
    deterministic_zip(&[
        ("agency.txt", agency),
        ("stops.txt", stops_t),
        ("routes.txt", routes),
        ("trips.txt", trips_t),
        ("stop_times.txt", stop_times),
        ("calendar_dates.txt", calendar_dates),
    ])
}

struct Sample {
    t: u32,
    lat: f64,
    lon: f64,
}

/// Positions of one trip given its actual stop times; samples near dropped
/// stops are withheld.
fn trip_samples(cfg: &ReplayConfig, stops: &[SynthStop], actual: &[u32], dropped: &[bool], rng: &mut ChaCha8Rng) -> Vec<Sample> {
    match cfg.sampling {
        Sampling::AtStops => stops
            .iter()
            .zip(actual)
            .zip(dropped)
            .filter(|(_, &d)| !d)
            .map(|((s, &t), _)| Sample { t, lat: s.lat, lon: s.lon })
            .collect(),
        Sampling::Periodic { interval_s } => {
            let phase = rng.random_range(0..interval_s);
            let (start, end) = (actual[0], *actual.last().unwrap());
            let mut out = Vec::new();
            let mut t = start + phase;
            let mut seg = 0;
            while t <= end {
                while seg + 2 < actual.len() && t > actual[seg + 1] {
                    seg += 1;
                }
                let (t0, t1) = (actual[seg], actual[seg + 1]);
                let frac = if t1 > t0 { (t - t0) as f64 / (t1 - t0) as f64 } else { 0.0 };
                // withhold anything that could be taken for a dropped stop
                let near_dropped = (dropped[seg] && frac < 0.55) || (dropped[seg + 1] && frac > 0.45);
                if !near_dropped {
                    let (a, b) = (&stops[seg], &stops[seg + 1]);
                    out.push(Sample { t, lat: a.lat + frac * (b.lat - a.lat), lon: a.lon + frac * (b.lon - a.lon) });
                }
                t += interval_s;
            }
            out
        }
    }
}

fn feed_bytes(fetched_at: u64, records: &[(&str, &SynthTrip, u64, f64, f64)], date: NaiveDate) -> Vec<u8> {
    let entity = records
        .iter()
        .map(|(vehicle, trip, t, lat, lon)| FeedEntity {
            id: vehicle.to_string(),
            is_deleted: None,
            trip_update: None,
            vehicle: Some(VehiclePosition {
                trip: Some(TripDescriptor {
                    trip_id: Some(trip.id.clone()),
                    start_time: None,
                    start_date: Some(date.format("%Y%m%d").to_string()),
                    schedule_relationship: None,
                    route_id: Some(format!("R{}", trip.route)),
                    direction_id: None,
                }),
                position: Some(Position { latitude: *lat as f32, longitude: *lon as f32, bearing: None, odometer: None, speed: None }),
                current_stop_sequence: None,
                current_status: None,
                timestamp: Some(*t),
                stop_id: None,
                vehicle: Some(VehicleDescriptor { id: Some(vehicle.to_string()), label: None, license_plate: None }),
            }),
            alert: None,
        })
        .collect();
    FeedMessage {
        header: FeedHeader { gtfs_realtime_version: "2.0".into(), incrementality: Some(0), timestamp: Some(fetched_at) },
        entity,
    }
    .encode_to_vec()
}

/// Writes the target day's timetable, the next day's (which also lists
/// the window-only trips), and the day's snapshots under `root` in the
/// archiver's layout.
pub fn generate(cfg: &ReplayConfig, root: &Path) -> Result<ReplayOutput, ReplayError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stops = layout(cfg);
    let trips = plan_trips(cfg);
    let date = cfg.service_date;
    let next = date.checked_add_days(Days::new(1)).ok_or_else(|| ReplayError::Config("date out of range".into()))?;

    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e| ReplayError::Io { path, source: e }
    };
    let regular: Vec<&SynthTrip> = trips.iter().filter(|t| !t.window_only).collect();
    let all: Vec<&SynthTrip> = trips.iter().collect();
    let mut timetables = Vec::new();
    for (d, list) in [(date, &regular), (next, &all)] {
        let path = timetable_path(root, d);
        atomic_write(&path, &timetable_zip(cfg, &stops, list, d)?).map_err(io_err(&path))?;
        timetables.push(path);
    }

    let origin = service_day_origin(date, cfg.timezone).timestamp();
    if origin < 0 {
        return Err(ReplayError::Config("service day precedes the epoch".into()));
    }
    let origin = origin as u64;
    let vehicle_ids: Vec<String> = trips.iter().enumerate().map(|(k, _)| format!("V{k:06}")).collect();

    let mut truth = Vec::new();
    // bucket end time -> records fetched then
    let mut buckets: BTreeMap<u64, Vec<(&str, &SynthTrip, u64, f64, f64)>> = BTreeMap::new();
    let step = cfg.snapshot_interval_s as u64;
    for (k, trip) in trips.iter().enumerate() {
        let route = &stops[trip.route];
        let actual: Vec<u32> = (0..route.len())
            .map(|i| {
                let sched = (trip.departure + i as u32 * cfg.stop_gap_s) as i64;
                (sched + cfg.delay.at(i as u32 + 1)).max(0) as u32
            })
            .collect();
        let dropped: Vec<bool> = (0..route.len()).map(|_| cfg.dropout > 0.0 && rng.random_bool(cfg.dropout)).collect();
        for (i, s) in route.iter().enumerate() {
            truth.push(TruthRow {
                trip_id: trip.id.clone(),
                stop_id: s.id.clone(),
                stop_sequence: i as u32 + 1,
                scheduled: ServiceTime(trip.departure + i as u32 * cfg.stop_gap_s),
                actual: ServiceTime(actual[i]),
                dropped: dropped[i],
                window_only: trip.window_only,
            });
        }
        for s in trip_samples(cfg, route, &actual, &dropped, &mut rng) {
            let t = origin + s.t as u64;
            let fetch = (t / step + 1) * step;
            let rec = (vehicle_ids[k].as_str(), trip, t, s.lat, s.lon);
            buckets.entry(fetch).or_default().push(rec);
            if cfg.duplicate_records {
                buckets.entry(fetch + step).or_default().push(rec);
            }
        }
    }

    let total = buckets.len();
    let (mut records, mut corrupt) = (0, 0);
    for (idx, (fetch, recs)) in buckets.iter().enumerate() {
        let path = rt_snapshot_path(root, date, EpochTimestamp(*fetch));
        let is_corrupt = ((idx + 1) as f64 * cfg.corrupt_share).floor() > (idx as f64 * cfg.corrupt_share).floor();
        let bytes = if is_corrupt {
            corrupt += 1;
            b"\x0a\xff\xff\xff\xff not a feed".to_vec()
        } else {
            records += recs.len();
            feed_bytes(*fetch, recs, date)
        };
        atomic_write(&path, &bytes).map_err(io_err(&path))?;
    }
    Ok(ReplayOutput { timetables, snapshots: total, corrupt_snapshots: corrupt, records, truth })
}

pub fn write_truth_csv<W: io::Write>(truth: &[TruthRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trip_id", "stop_id", "stop_sequence", "scheduled", "actual", "dropped", "window_only"])?;
    for r in truth {
        w.write_record([
            r.trip_id.as_str(),
            r.stop_id.as_str(),
            &r.stop_sequence.to_string(),
            &r.scheduled.to_string(),
            &r.actual.to_string(),
            if r.dropped { "1" } else { "0" },
            if r.window_only { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}
