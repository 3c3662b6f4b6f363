//! Corrected GTFS bundles for one observed service day, and the JSON run
//! report written next to them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use crate::gtfs::{self, Agency, GtfsError, Route, TimetableSnapshot};
use crate::inference::{CorrectedTrip, InferenceStats, Provenance};
use crate::ingest::IngestStats;
use crate::matcher::MatchStats;
use crate::model::Stop;
use crate::resolver::ResolutionStats;
use crate::util::atomic_write;

/// Extension column on stop_times.txt naming how each time was obtained.
pub const PROVENANCE_COLUMN: &str = "rtc_provenance";
/// Extension column on trips.txt naming the timetable snapshot the trip's
/// schedule was taken from (YYYYMMDD).
pub const SOURCE_DATE_COLUMN: &str = "rtc_source_date";
/// Agency id used when a route's operator cannot be identified.
pub const FALLBACK_AGENCY_ID: &str = "rtc_agency";

const FILE_ORDER: [&str; 6] =
    ["agency.txt", "stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar_dates.txt"];

#[derive(Debug, Error)]
pub enum WriteError {
    #[error("bundle consistency: {0}")]
    Consistency(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Zip(#[from] zip::result::ZipError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The day's corrected trips plus the stops, routes and agencies they
/// reference, copied from the timetables the trips were resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedGtfsBundle {
    pub service_date: NaiveDate,
    /// Sorted by trip_id.
    pub trips: Vec<CorrectedTrip>,
    pub stops: BTreeMap<String, Stop>,
    pub routes: BTreeMap<String, Route>,
    /// Keyed by agency_id; every emitted agency carries one.
    pub agencies: BTreeMap<String, Agency>,
}

pub fn service_id_for(date: NaiveDate) -> String {
    format!("rtc_{}", date.format("%Y%m%d"))
}

fn find_in<'a, T>(
    primary: Option<&'a TimetableSnapshot>,
    sources: &'a [Arc<TimetableSnapshot>],
    get: impl Fn(&'a TimetableSnapshot) -> Option<&'a T>,
) -> Option<&'a T> {
    primary.and_then(&get).or_else(|| sources.iter().find_map(|s| get(s)))
}

impl CorrectedGtfsBundle {
    /// Gathers the entities `trips` reference from `sources`, preferring each
    /// trip's own source snapshot. `timezone` is used only for a synthesized
    /// agency when no source names one.
    pub fn assemble(
        service_date: NaiveDate,
        mut trips: Vec<CorrectedTrip>,
        sources: &[Arc<TimetableSnapshot>],
        timezone: &str,
    ) -> Result<Self, WriteError> {
        trips.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        let by_date: HashMap<NaiveDate, &TimetableSnapshot> =
            sources.iter().map(|s| (s.snapshot_date, s.as_ref())).collect();

        let mut stops = BTreeMap::new();
        let mut routes = BTreeMap::new();
        let mut agencies = BTreeMap::new();
        for trip in &trips {
            let own = by_date.get(&trip.source_snapshot_date).copied();
            for st in &trip.stop_times {
                if stops.contains_key(&st.stop_id) {
                    continue;
                }
                let stop = find_in(own, sources, |s| s.stops_by_id.get(&st.stop_id)).ok_or_else(|| {
                    WriteError::Consistency(format!("trip {} stop {} is in no source timetable", trip.trip_id, st.stop_id))
                })?;
                stops.insert(st.stop_id.clone(), stop.clone());
            }
            if routes.contains_key(&trip.route_id) {
                continue;
            }
            let route = find_in(own, sources, |s| s.routes_by_id.get(&trip.route_id)).ok_or_else(|| {
                WriteError::Consistency(format!("trip {} route {} is in no source timetable", trip.trip_id, trip.route_id))
            })?;
            let agency = resolve_agency(route, own, sources, timezone);
            let id = agency.agency_id.clone().expect("resolved agencies carry an id");
            agencies.entry(id.clone()).or_insert(agency);
            routes.insert(route.route_id.clone(), Route { agency_id: Some(id), ..route.clone() });
        }
        Ok(Self { service_date, trips, stops, routes, agencies })
    }

    pub fn service_id(&self) -> String {
        service_id_for(self.service_date)
    }

    /// Checks there are no dangling references among the emitted tables.
    pub fn check(&self) -> Result<(), WriteError> {
        for trip in &self.trips {
            if !self.routes.contains_key(&trip.route_id) {
                return Err(WriteError::Consistency(format!("trip {} has unknown route {}", trip.trip_id, trip.route_id)));
            }
            for st in &trip.stop_times {
                if !self.stops.contains_key(&st.stop_id) {
                    return Err(WriteError::Consistency(format!("trip {} has unknown stop {}", trip.trip_id, st.stop_id)));
                }
            }
        }
        for r in self.routes.values() {
            if !r.agency_id.as_ref().is_some_and(|a| self.agencies.contains_key(a)) {
                return Err(WriteError::Consistency(format!("route {} has no emitted agency", r.route_id)));
            }
        }
        Ok(())
    }

    pub fn stop_time_count(&self) -> usize {
        self.trips.iter().map(|t| t.stop_times.len()).sum()
    }
}

fn resolve_agency(route: &Route, own: Option<&TimetableSnapshot>, sources: &[Arc<TimetableSnapshot>], timezone: &str) -> Agency {
    let with_id = |a: &Agency| Agency {
        agency_id: Some(a.agency_id.clone().unwrap_or_else(|| FALLBACK_AGENCY_ID.to_string())),
        ..a.clone()
    };
    if let Some(id) = &route.agency_id {
        let found = find_in(own, sources, |s| s.agencies.iter().find(|a| a.agency_id.as_ref() == Some(id)));
        if let Some(a) = found {
            return with_id(a);
        }
    } else if let Some(s) = own.filter(|s| s.agencies.len() == 1) {
        // a lone agency may omit its id and be referenced implicitly
        return with_id(&s.agencies[0]);
    }
    warn!(route_id = %route.route_id, "route operator not found; using placeholder agency");
    Agency {
        agency_id: Some(FALLBACK_AGENCY_ID.to_string()),
        name: "Unknown operator".into(),
        url: "https://example.invalid/".into(),
        timezone: timezone.to_string(),
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, WriteError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| WriteError::Csv(e.into_error().into()))
}

fn tables(bundle: &CorrectedGtfsBundle) -> Result<Vec<(&'static str, Vec<u8>)>, WriteError> {
    let service_id = bundle.service_id();
    let agency = csv_bytes(
        &["agency_id", "agency_name", "agency_url", "agency_timezone"],
        bundle.agencies.iter().map(|(id, a)| vec![id.clone(), a.name.clone(), a.url.clone(), a.timezone.clone()]),
    )?;
    let stops = csv_bytes(
        &["stop_id", "stop_name", "stop_lat", "stop_lon"],
        bundle.stops.values().map(|s| {
            vec![s.stop_id.clone(), s.name.clone(), s.location.lat().to_string(), s.location.lon().to_string()]
        }),
    )?;
    let routes = csv_bytes(
        &["route_id", "agency_id", "route_short_name", "route_long_name", "route_type"],
        bundle.routes.values().map(|r| {
            vec![
                r.route_id.clone(),
                r.agency_id.clone().unwrap_or_default(),
                r.short_name.clone(),
                r.long_name.clone(),
                r.route_type.to_string(),
            ]
        }),
    )?;
    let trips = csv_bytes(
        &["route_id", "service_id", "trip_id", "trip_headsign", "direction_id", SOURCE_DATE_COLUMN],
        bundle.trips.iter().map(|t| {
            vec![
                t.route_id.clone(),
                service_id.clone(),
                t.trip_id.clone(),
                t.headsign.clone().unwrap_or_default(),
                t.direction_id.map(|d| d.to_string()).unwrap_or_default(),
                t.source_snapshot_date.format("%Y%m%d").to_string(),
            ]
        }),
    )?;
    let stop_times = csv_bytes(
        &["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence", PROVENANCE_COLUMN],
        bundle.trips.iter().flat_map(|t| {
            t.stop_times.iter().map(|st| {
                let time = st.corrected.to_string();
                vec![
                    t.trip_id.clone(),
                    time.clone(),
                    time,
                    st.stop_id.clone(),
                    st.stop_sequence.to_string(),
                    st.provenance.as_str().to_string(),
                ]
            })
        }),
    )?;
    let calendar_dates = csv_bytes(
        &["service_id", "date", "exception_type"],
        [vec![service_id.clone(), bundle.service_date.format("%Y%m%d").to_string(), "1".into()]],
    )?;
    Ok(FILE_ORDER.into_iter().zip([agency, stops, routes, trips, stop_times, calendar_dates]).collect())
}

/// Serializes the bundle to ZIP bytes. Identical bundles give identical
/// bytes: fixed entry order, timestamps and permissions.
pub fn bundle_bytes(bundle: &CorrectedGtfsBundle) -> Result<Vec<u8>, WriteError> {
    bundle.check()?;
    if bundle.trips.is_empty() {
        warn!(date = %bundle.service_date, "writing a bundle with no trips");
    }
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    for (name, body) in tables(bundle)? {
        zip.start_file(name, options)?;
        zip.write_all(&body).map_err(|e| WriteError::Io { path: name.into(), source: e })?;
    }
    Ok(zip.finish()?.into_inner())
}

pub fn write_bundle(bundle: &CorrectedGtfsBundle, out_path: &Path) -> Result<(), WriteError> {
    let bytes = bundle_bytes(bundle)?;
    atomic_write(out_path, &bytes).map_err(|e| WriteError::Io { path: out_path.into(), source: e })
}

pub fn bundle_path(work_root: &Path, date: NaiveDate) -> PathBuf {
    work_root.join("corrected").join(format!("{}.gtfs.zip", date.format("%Y-%m-%d")))
}

pub fn report_path(work_root: &Path, date: NaiveDate) -> PathBuf {
    work_root.join("reports").join(format!("{}.json", date.format("%Y-%m-%d")))
}

/// A corrected bundle read back: the timetable plus the extension columns.
#[derive(Debug)]
pub struct ReadBundle {
    /// The single date of the synthetic service, if the bundle has one.
    pub service_date: Option<NaiveDate>,
    pub timetable: TimetableSnapshot,
    pub provenance: HashMap<(String, u32), Provenance>,
    pub source_dates: HashMap<String, NaiveDate>,
}

pub fn read_bundle_from_reader<R: Read + Seek>(mut reader: R) -> Result<ReadBundle, GtfsError> {
    let mut zip = zip::ZipArchive::new(&mut reader)?;
    let service_date = gtfs::optional(&mut zip, "calendar_dates.txt")?.and_then(|t| {
        let c = t.opt_col("date")?;
        t.rows.first().and_then(|r| gtfs::parse_gtfs_date(gtfs::field(r, c)))
    });

    let st = gtfs::required(&mut zip, "stop_times.txt")?;
    let mut provenance = HashMap::new();
    if let Some(pc) = st.opt_col(PROVENANCE_COLUMN) {
        let (tc, sc) = (st.col("trip_id")?, st.col("stop_sequence")?);
        for r in &st.rows {
            let (Ok(seq), Ok(p)) = (gtfs::field(r, sc).parse(), gtfs::field(r, pc).parse()) else { continue };
            provenance.insert((gtfs::field(r, tc).to_string(), seq), p);
        }
    }
    let trips = gtfs::required(&mut zip, "trips.txt")?;
    let mut source_dates = HashMap::new();
    if let Some(dc) = trips.opt_col(SOURCE_DATE_COLUMN) {
        let tc = trips.col("trip_id")?;
        for r in &trips.rows {
            if let Some(d) = gtfs::parse_gtfs_date(gtfs::field(r, dc)) {
                source_dates.insert(gtfs::field(r, tc).to_string(), d);
            }
        }
    }
    drop(zip);
    reader.rewind().map_err(|e| GtfsError::Io { path: "<bundle>".into(), source: e })?;
    let timetable = gtfs::load_timetable_from_reader(reader, service_date.unwrap_or_default())?;
    Ok(ReadBundle { service_date, timetable, provenance, source_dates })
}

pub fn read_bundle(path: &Path) -> Result<ReadBundle, GtfsError> {
    let file = std::fs::File::open(path).map_err(|e| GtfsError::Io { path: path.into(), source: e })?;
    read_bundle_from_reader(io::BufReader::new(file))
}

/// Referential problems found by [`validate_gtfs`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub agencies: usize,
    pub stops: usize,
    pub routes: usize,
    pub trips: usize,
    pub stop_times: usize,
    pub foreign_key_errors: Vec<String>,
    /// Rows the loader dropped as unusable.
    pub dropped_rows: u64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.foreign_key_errors.is_empty() && self.dropped_rows == 0
    }
}

/// Loads a GTFS ZIP and checks the references between its tables.
pub fn validate_gtfs(bytes: &[u8]) -> Result<ValidationReport, GtfsError> {
    let snapshot = gtfs::load_timetable_from_bytes(bytes, NaiveDate::default())?;
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes))?;
    let ids = |t: &gtfs::Table, col: &'static str| -> Result<BTreeSet<String>, GtfsError> {
        let c = t.col(col)?;
        Ok(t.rows.iter().map(|r| gtfs::field(r, c).to_string()).collect())
    };
    let mut errors = Vec::new();

    let agency = gtfs::optional(&mut zip, "agency.txt")?;
    let agency_ids = match &agency {
        Some(t) if t.opt_col("agency_id").is_some() => ids(t, "agency_id")?,
        _ => BTreeSet::new(),
    };
    let agency_rows = agency.as_ref().map_or(0, |t| t.rows.len());
    let stops = gtfs::required(&mut zip, "stops.txt")?;
    let stop_ids = ids(&stops, "stop_id")?;
    let routes = gtfs::required(&mut zip, "routes.txt")?;
    let route_ids = ids(&routes, "route_id")?;
    if let Some(ac) = routes.opt_col("agency_id") {
        for r in &routes.rows {
            let a = gtfs::field(r, ac);
            if !(a.is_empty() && agency_rows <= 1) && !agency_ids.contains(a) {
                errors.push(format!("routes.txt: route {} references unknown agency {a:?}", gtfs::field(r, 0)));
            }
        }
    } else if agency_rows > 1 {
        errors.push("routes.txt: agency_id required with several agencies".into());
    }

    let mut service_ids = BTreeSet::new();
    for file in ["calendar.txt", "calendar_dates.txt"] {
        if let Some(t) = gtfs::optional(&mut zip, file)? {
            service_ids.extend(ids(&t, "service_id")?);
        }
    }
    let trips = gtfs::required(&mut zip, "trips.txt")?;
    let (tr, ts, ti) = (trips.col("route_id")?, trips.col("service_id")?, trips.col("trip_id")?);
    let mut trip_ids = BTreeSet::new();
    for r in &trips.rows {
        let id = gtfs::field(r, ti);
        trip_ids.insert(id.to_string());
        if !route_ids.contains(gtfs::field(r, tr)) {
            errors.push(format!("trips.txt: trip {id} references unknown route {:?}", gtfs::field(r, tr)));
        }
        if !service_ids.contains(gtfs::field(r, ts)) {
            errors.push(format!("trips.txt: trip {id} references unknown service {:?}", gtfs::field(r, ts)));
        }
    }
    let st = gtfs::required(&mut zip, "stop_times.txt")?;
    let (sc_trip, sc_stop) = (st.col("trip_id")?, st.col("stop_id")?);
    for r in &st.rows {
        if !trip_ids.contains(gtfs::field(r, sc_trip)) {
            errors.push(format!("stop_times.txt: unknown trip {:?}", gtfs::field(r, sc_trip)));
        }
        if !stop_ids.contains(gtfs::field(r, sc_stop)) {
            errors.push(format!("stop_times.txt: unknown stop {:?}", gtfs::field(r, sc_stop)));
        }
    }

    Ok(ValidationReport {
        agencies: agency_rows,
        stops: stops.rows.len(),
        routes: routes.rows.len(),
        trips: trips.rows.len(),
        stop_times: st.rows.len(),
        foreign_key_errors: errors,
        dropped_rows: snapshot.stats.dropped_rows(),
    })
}

/// Run parameters echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub timezone: String,
    pub radius_m: f64,
    pub window_before: u32,
    pub window_after: u32,
    pub min_matches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStats {
    pub probed_days: u64,
    pub loaded_days: u64,
    pub missing_days: u64,
    /// Rows the target timetable loader dropped as unusable.
    pub target_dropped_rows: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputStats {
    pub agencies: u64,
    pub stops: u64,
    pub routes: u64,
    pub trips: u64,
    pub stop_times: u64,
}

impl OutputStats {
    pub fn of(bundle: &CorrectedGtfsBundle) -> Self {
        Self {
            agencies: bundle.agencies.len() as u64,
            stops: bundle.stops.len() as u64,
            routes: bundle.routes.len() as u64,
            trips: bundle.trips.len() as u64,
            stop_times: bundle.stop_time_count() as u64,
        }
    }
}

/// Quality ratios derived from the counts; `None` when the denominator is zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    /// Share of raw records removed as duplicates.
    pub dedup_ratio: Option<f64>,
    pub resolution_rate: Option<f64>,
    /// Matched observations over resolved observations.
    pub observation_match_rate: Option<f64>,
    /// Matched stops over scheduled stops of observed trips.
    pub stop_match_rate: Option<f64>,
    pub matched_share: Option<f64>,
    pub interpolated_share: Option<f64>,
    pub extrapolated_share: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Everything one day's run measured. Counts are exact; see [`Ratios`] for
/// the derived figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub service_date: NaiveDate,
    pub config: ReportConfig,
    pub ingest: IngestStats,
    pub window: WindowStats,
    pub resolution: ResolutionStats,
    pub matching: MatchStats,
    pub inference: InferenceStats,
    pub output: OutputStats,
    pub ratios: Ratios,
}

impl RunReport {
    pub fn new(
        service_date: NaiveDate,
        config: ReportConfig,
        ingest: IngestStats,
        window: WindowStats,
        resolution: ResolutionStats,
        matching: MatchStats,
        inference: InferenceStats,
        output: OutputStats,
    ) -> Self {
        let extrapolated = inference.extrapolated_backward + inference.extrapolated_forward;
        let ratios = Ratios {
            dedup_ratio: ratio(ingest.raw_records - ingest.deduplicated_records, ingest.raw_records),
            resolution_rate: resolution.resolution_rate(),
            observation_match_rate: ratio(matching.observations_matched, matching.observations),
            stop_match_rate: ratio(matching.stops_matched, matching.scheduled_stops),
            matched_share: ratio(inference.matched, inference.stop_times),
            interpolated_share: ratio(inference.interpolated, inference.stop_times),
            extrapolated_share: ratio(extrapolated, inference.stop_times),
        };
        Self { service_date, config, ingest, window, resolution, matching, inference, output, ratios }
    }

    pub fn to_json(&self) -> Result<Vec<u8>, WriteError> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}

pub fn write_run_report(report: &RunReport, out_path: &Path) -> Result<(), WriteError> {
    atomic_write(out_path, &report.to_json()?).map_err(|e| WriteError::Io { path: out_path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtfs::tests::zip_of;
    use crate::inference::CorrectedStopTime;
    use crate::model::ServiceTime;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, 7, 8).unwrap()
    }

    fn source() -> Arc<TimetableSnapshot> {
        let z = zip_of(&[
            ("agency.txt", "agency_id,agency_name,agency_url,agency_timezone\nA1,Buses,https://b.example/,Europe/London\n"),
            ("stops.txt", "stop_id,stop_name,stop_lat,stop_lon\nS1,One,51.0,-1.0\nS2,\"Two, East\",51.001,-1.0\nS3,Three,51.002,-1.0\n"),
            ("routes.txt", "route_id,agency_id,route_short_name,route_long_name,route_type\nR1,A1,1,Line one,3\n"),
            ("trips.txt", "route_id,service_id,trip_id,shape_id\nR1,WK,T1,sh\n"),
            (
                "stop_times.txt",
                "trip_id,arrival_time,departure_time,stop_id,stop_sequence\nT1,14:25:00,14:25:00,S1,1\nT1,14:26:00,14:26:00,S2,2\nT1,14:27:00,14:27:00,S3,3\n",
            ),
            ("calendar_dates.txt", "service_id,date,exception_type\nWK,20250708,1\n"),
        ]);
        Arc::new(gtfs::load_timetable_from_bytes(&z, date()).unwrap())
    }

    fn st(seq: u32, t: u32, p: Provenance) -> CorrectedStopTime {
        CorrectedStopTime {
            stop_id: format!("S{seq}"),
            stop_sequence: seq,
            scheduled: ServiceTime(t),
            corrected: ServiceTime(t),
            provenance: p,
            repaired: false,
        }
    }

    fn trip(times: Vec<CorrectedStopTime>) -> CorrectedTrip {
        CorrectedTrip {
            trip_id: "T1".into(),
            route_id: "R1".into(),
            headsign: Some("Town".into()),
            direction_id: Some(0),
            source_snapshot_date: date(),
            service_date: date(),
            stop_times: times,
            match_count: 2,
        }
    }

    fn three_stop() -> CorrectedGtfsBundle {
        let times = vec![
            st(1, 52022, Provenance::Matched),
            st(2, 52114, Provenance::Interpolated),
            st(3, 88200, Provenance::Matched),
        ];
        CorrectedGtfsBundle::assemble(date(), vec![trip(times)], &[source()], "Europe/London").unwrap()
    }

    fn entry(bytes: &[u8], name: &str) -> String {
        let mut z = zip::ZipArchive::new(Cursor::new(bytes)).unwrap();
        let mut s = String::new();
        z.by_name(name).unwrap().read_to_string(&mut s).unwrap();
        s
    }

    #[test]
    fn stop_times_in_sequence_with_provenance() {
        let bytes = bundle_bytes(&three_stop()).unwrap();
        assert_eq!(
            entry(&bytes, "stop_times.txt"),
            "trip_id,arrival_time,departure_time,stop_id,stop_sequence,rtc_provenance\n\
             T1,14:27:02,14:27:02,S1,1,matched\n\
             T1,14:28:34,14:28:34,S2,2,interpolated\n\
             T1,24:30:00,24:30:00,S3,3,matched\n"
        );
        assert_eq!(
            entry(&bytes, "calendar_dates.txt"),
            "service_id,date,exception_type\nrtc_20250708,20250708,1\n"
        );
        let names: Vec<_> = zip::ZipArchive::new(Cursor::new(&bytes[..])).unwrap().file_names().map(String::from).collect();
        assert_eq!(names, FILE_ORDER);
    }

    #[test]
    fn round_trips_through_loader() {
        let bundle = three_stop();
        let read = read_bundle_from_reader(Cursor::new(bundle_bytes(&bundle).unwrap())).unwrap();
        assert_eq!(read.service_date, Some(date()));
        let t = read.timetable.trip("T1").unwrap();
        let got: Vec<_> = t.stop_times.iter().map(|s| (s.stop_id.clone(), s.stop_sequence, s.arrival, s.departure)).collect();
        let want: Vec<_> = bundle.trips[0]
            .stop_times
            .iter()
            .map(|s| (s.stop_id.clone(), s.stop_sequence, s.corrected, s.corrected))
            .collect();
        assert_eq!(got, want);
        assert_eq!(read.provenance[&("T1".to_string(), 2)], Provenance::Interpolated);
        assert_eq!(read.source_dates["T1"], date());
        assert_eq!(read.timetable.stops_by_id["S2"], bundle.stops["S2"]);
        assert_eq!(t.headsign.as_deref(), Some("Town"));
        assert!(read.timetable.trip_active_on("T1", date()).unwrap());
        assert!(!read.timetable.trip_active_on("T1", date().succ_opt().unwrap()).unwrap());
        assert_eq!(read.timetable.stats.dropped_rows(), 0);
    }

    #[test]
    fn bytes_are_deterministic() {
        assert_eq!(bundle_bytes(&three_stop()).unwrap(), bundle_bytes(&three_stop()).unwrap());
    }

    #[test]
    fn output_passes_validation() {
        let report = validate_gtfs(&bundle_bytes(&three_stop()).unwrap()).unwrap();
        assert!(report.is_valid(), "{report:?}");
        assert_eq!((report.trips, report.stop_times, report.stops), (1, 3, 3));
    }

    #[test]
    fn validation_flags_dangling_references() {
        let z = zip_of(&[
            ("stops.txt", "stop_id,stop_name,stop_lat,stop_lon\nS1,One,51.0,-1.0\n"),
            ("routes.txt", "route_id,agency_id,route_short_name,route_long_name,route_type\nR1,A9,1,x,3\n"),
            ("trips.txt", "route_id,service_id,trip_id\nR2,WK,T1\n"),
            ("stop_times.txt", "trip_id,arrival_time,departure_time,stop_id,stop_sequence\nT1,10:00:00,10:00:00,S9,1\n"),
            ("calendar_dates.txt", "service_id,date,exception_type\nWK,20250708,1\n"),
        ]);
        let r = validate_gtfs(&z).unwrap();
        assert_eq!(r.foreign_key_errors.len(), 3, "{:?}", r.foreign_key_errors);
        assert!(!r.is_valid());
    }

    #[test]
    fn empty_day_is_headers_only() {
        let bundle = CorrectedGtfsBundle::assemble(date(), vec![], &[source()], "Europe/London").unwrap();
        let bytes = bundle_bytes(&bundle).unwrap();
        assert_eq!(entry(&bytes, "trips.txt"), "route_id,service_id,trip_id,trip_headsign,direction_id,rtc_source_date\n");
        let read = read_bundle_from_reader(Cursor::new(bytes)).unwrap();
        assert!(read.timetable.trips_by_id.is_empty());
    }

    #[test]
    fn stop_missing_everywhere_is_fatal() {
        let mut t = trip(vec![st(1, 100, Provenance::Matched)]);
        t.stop_times[0].stop_id = "GHOST".into();
        let err = CorrectedGtfsBundle::assemble(date(), vec![t], &[source()], "Europe/London").unwrap_err();
        assert!(matches!(err, WriteError::Consistency(_)));
    }

    #[test]
    fn agency_synthesized_when_source_has_none() {
        let z = zip_of(&[
            ("stops.txt", "stop_id,stop_name,stop_lat,stop_lon\nS1,One,51.0,-1.0\n"),
            ("routes.txt", "route_id,route_short_name,route_long_name,route_type\nR1,1,x,3\n"),
            ("trips.txt", "route_id,service_id,trip_id\nR1,WK,T1\n"),
            ("stop_times.txt", "trip_id,arrival_time,departure_time,stop_id,stop_sequence\nT1,10:00:00,10:00:00,S1,1\n"),
            ("calendar_dates.txt", "service_id,date,exception_type\nWK,20250708,1\n"),
        ]);
        let src = Arc::new(gtfs::load_timetable_from_bytes(&z, date()).unwrap());
        let bundle = CorrectedGtfsBundle::assemble(date(), vec![trip(vec![st(1, 100, Provenance::Matched)])], &[src], "Europe/London")
            .unwrap();
        assert_eq!(bundle.agencies.keys().collect::<Vec<_>>(), [FALLBACK_AGENCY_ID]);
        assert!(validate_gtfs(&bundle_bytes(&bundle).unwrap()).unwrap().is_valid());
    }

    fn report_for(ingest: IngestStats, inference: InferenceStats) -> RunReport {
        RunReport::new(
            date(),
            ReportConfig { timezone: "Europe/London".into(), radius_m: 300.0, window_before: 7, window_after: 7, min_matches: 1 },
            ingest,
            WindowStats::default(),
            ResolutionStats::default(),
            MatchStats::default(),
            inference,
            OutputStats::default(),
        )
    }

    #[test]
    fn doubled_records_give_half_dedup_ratio() {
        let ingest = IngestStats { raw_records: 200, deduplicated_records: 100, ..Default::default() };
        assert_eq!(report_for(ingest, InferenceStats::default()).ratios.dedup_ratio, Some(0.5));
    }

    #[test]
    fn empty_day_has_null_ratios() {
        let r = report_for(IngestStats::default(), InferenceStats::default());
        let v: serde_json::Value = serde_json::from_slice(&r.to_json().unwrap()).unwrap();
        for (_, x) in v["ratios"].as_object().unwrap() {
            assert!(x.is_null());
        }
        assert_eq!(v["ingest"]["raw_records"], 0);
    }

    #[test]
    fn full_coverage_has_zero_extrapolated_share() {
        let inf = InferenceStats { trips_corrected: 1, stop_times: 30, matched: 30, ..Default::default() };
        let r = report_for(IngestStats::default(), inf);
        assert_eq!(r.ratios.extrapolated_share, Some(0.0));
        assert_eq!(r.ratios.matched_share, Some(1.0));
    }
}
