//! Vehicle-to-stop matching: a bounding-box prefilter around each
//! observation, exact great-circle distance to the surviving stops, and a
//! per-trip reduction to the closest approach at each stop.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::geo::{great_circle_distance, meters_to_angular_threshold, GeoError};
use crate::gtfs::RouteStop;
use crate::model::{EpochTimestamp, GeoPoint, Stop, VehiclePositionRecord};

pub const DEFAULT_RADIUS_M: f64 = 300.0;

/// Distances closer than this are treated as equal when picking a stop.
const DISTANCE_TIE_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    radius_m: f64,
    delta_deg: f64,
}

impl MatcherConfig {
    pub fn new(radius_m: f64) -> Result<Self, GeoError> {
        Ok(Self { radius_m, delta_deg: meters_to_angular_threshold(radius_m, 0.0)? })
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    pub fn delta_deg(&self) -> f64 {
        self.delta_deg
    }
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self::new(DEFAULT_RADIUS_M).expect("default radius is positive")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateStop<'a> {
    pub stop: &'a Stop,
    pub stop_sequence: u32,
    pub exact_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopMatch {
    pub trip_id: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub matched_distance: f64,
    pub observed_at: EpochTimestamp,
}

/// The box test: `|φs − φp| < δ` and `|(λs − λp)·cos φp| < δ`.
#[inline]
pub fn in_coarse_box(p: GeoPoint, s: GeoPoint, delta: f64, cos_lat_p: f64) -> bool {
    (s.lat() - p.lat()).abs() < delta && ((s.lon() - p.lon()) * cos_lat_p).abs() < delta
}

/// Stops of the route inside the box around `p`, in route order.
pub fn coarse_filter<'a>(p: GeoPoint, stops: &[RouteStop<'a>], delta: f64) -> Vec<RouteStop<'a>> {
    let cos_lat = p.lat().to_radians().cos();
    stops
        .iter()
        .filter(|rs| in_coarse_box(p, rs.stop.location, delta, cos_lat))
        .copied()
        .collect()
}

pub fn candidates<'a>(p: GeoPoint, stops: &[RouteStop<'a>], config: &MatcherConfig) -> Vec<CandidateStop<'a>> {
    coarse_filter(p, stops, config.delta_deg)
        .into_iter()
        .map(|rs| CandidateStop {
            stop: rs.stop,
            stop_sequence: rs.stop_sequence,
            exact_distance: great_circle_distance(p, rs.stop.location),
        })
        .collect()
}

/// Nearest coarse candidate to `p`; ties go to the lower stop_sequence.
/// No distance cut is applied beyond the box itself.
pub fn nearest_candidate<'a>(p: GeoPoint, stops: &[RouteStop<'a>], config: &MatcherConfig) -> Option<CandidateStop<'a>> {
    let mut best: Option<CandidateStop<'a>> = None;
    for c in candidates(p, stops, config) {
        best = match best {
            Some(b) if c.exact_distance < b.exact_distance - DISTANCE_TIE_M => Some(c),
            Some(b) if (c.exact_distance - b.exact_distance).abs() <= DISTANCE_TIE_M && c.stop_sequence < b.stop_sequence => {
                Some(c)
            }
            None => Some(c),
            keep => keep,
        };
    }
    best
}

pub fn match_observation(
    record: &VehiclePositionRecord,
    trip_id: &str,
    stops: &[RouteStop<'_>],
    config: &MatcherConfig,
) -> Option<StopMatch> {
    nearest_candidate(record.position, stops, config).map(|c| StopMatch {
        trip_id: trip_id.to_string(),
        stop_id: c.stop.stop_id.clone(),
        stop_sequence: c.stop_sequence,
        matched_distance: c.exact_distance,
        observed_at: record.observed_at,
    })
}

/// Per-day matching counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    /// Resolved observations offered to the matcher.
    pub observations: u64,
    pub observations_matched: u64,
    /// Matched observations dropped because their time fell outside the
    /// service day's window.
    pub observations_out_of_window: u64,
    pub trips_observed: u64,
    /// Scheduled stops across all observed trips.
    pub scheduled_stops: u64,
    /// Stops kept after reduction.
    pub stops_matched: u64,
    pub matches_demoted: u64,
    /// Scheduled stops whose stop_id had no coordinates in the source timetable.
    pub stops_without_location: u64,
}

impl MatchStats {
    pub fn merge(&mut self, other: &Self) {
        self.observations += other.observations;
        self.observations_matched += other.observations_matched;
        self.observations_out_of_window += other.observations_out_of_window;
        self.trips_observed += other.trips_observed;
        self.scheduled_stops += other.scheduled_stops;
        self.stops_matched += other.stops_matched;
        self.matches_demoted += other.matches_demoted;
        self.stops_without_location += other.stops_without_location;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReducedMatches {
    pub by_sequence: BTreeMap<u32, StopMatch>,
    /// Matches discarded to make timestamps strictly increasing.
    pub demoted: usize,
}

fn closer(a: &StopMatch, b: &StopMatch) -> bool {
    a.matched_distance
        .total_cmp(&b.matched_distance)
        .then(a.observed_at.cmp(&b.observed_at))
        .is_lt()
}

/// Keeps the closest approach per stop_sequence (earliest on distance ties),
/// then repeatedly discards the farther of any adjacent pair whose timestamps
/// fail to increase until the sequence is strictly monotone.
pub fn reduce_matches(matches: impl IntoIterator<Item = StopMatch>) -> ReducedMatches {
    let mut best: BTreeMap<u32, StopMatch> = BTreeMap::new();
    for m in matches {
        match best.get(&m.stop_sequence) {
            Some(cur) if !closer(&m, cur) => {}
            _ => {
                best.insert(m.stop_sequence, m);
            }
        }
    }

    let mut kept: Vec<StopMatch> = best.into_values().collect();
    let mut demoted = 0;
    while let Some(i) = (1..kept.len()).find(|&i| kept[i].observed_at <= kept[i - 1].observed_at) {
        // drop the farther match; on equal distance the later stop goes
        let drop = if kept[i - 1].matched_distance > kept[i].matched_distance { i - 1 } else { i };
        kept.remove(drop);
        demoted += 1;
    }
    ReducedMatches {
        by_sequence: kept.into_iter().map(|m| (m.stop_sequence, m)).collect(),
        demoted,
    }
}

/// Debug export of matches as `trip_id,stop_id,stop_sequence,matched_distance_m,observed_at`.
pub fn write_matches_csv<'a, W: io::Write>(matches: impl IntoIterator<Item = &'a StopMatch>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trip_id", "stop_id", "stop_sequence", "matched_distance_m", "observed_at"])?;
    for m in matches {
        w.write_record([
            m.trip_id.as_str(),
            m.stop_id.as_str(),
            &m.stop_sequence.to_string(),
            &format!("{:.3}", m.matched_distance),
            &m.observed_at.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
