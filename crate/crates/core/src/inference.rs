//! Completes a trip's stop times from its matched stops: linear
//! interpolation between matched neighbours, and a constant-deviation shift
//! of the schedule before the first and after the last match.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EpochTimestamp, ScheduledTrip, ServiceTime};

/// Observations up to this long before the service day's midnight are in
/// the window of that day.
pub const WINDOW_BEFORE_S: i64 = 6 * 3600;
/// ... and up to this long after it.
pub const WINDOW_AFTER_S: i64 = 30 * 3600;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferenceError {
    #[error("observation at {t} is outside the window of service day {date}")]
    OutOfWindow { t: EpochTimestamp, date: NaiveDate },
    #[error("observation at {t} precedes midnight of service day {date}")]
    BeforeServiceDay { t: EpochTimestamp, date: NaiveDate },
    #[error("trip {0} has no matched stop to anchor inference")]
    NoAnchors(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Matched,
    Interpolated,
    ExtrapolatedBackward,
    ExtrapolatedForward,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Matched => "matched",
            Self::Interpolated => "interpolated",
            Self::ExtrapolatedBackward => "extrapolated_backward",
            Self::ExtrapolatedForward => "extrapolated_forward",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matched" => Self::Matched,
            "interpolated" => Self::Interpolated,
            "extrapolated_backward" => Self::ExtrapolatedBackward,
            "extrapolated_forward" => Self::ExtrapolatedForward,
            other => return Err(format!("unknown provenance {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedStopTime {
    pub stop_id: String,
    pub stop_sequence: u32,
    pub scheduled: ServiceTime,
    pub corrected: ServiceTime,
    pub provenance: Provenance,
    /// Set when the monotonicity repair moved this value.
    pub repaired: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferredStopTimes {
    pub stop_times: Vec<CorrectedStopTime>,
    pub match_count: usize,
    pub repaired: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedTrip {
    pub trip_id: String,
    pub route_id: String,
    pub headsign: Option<String>,
    pub direction_id: Option<u8>,
    pub source_snapshot_date: NaiveDate,
    pub service_date: NaiveDate,
    pub stop_times: Vec<CorrectedStopTime>,
    pub match_count: usize,
}

/// Per-day counts over every inferred trip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceStats {
    pub trips_corrected: u64,
    pub trips_below_min_matches: u64,
    pub stop_times: u64,
    pub matched: u64,
    pub interpolated: u64,
    pub extrapolated_backward: u64,
    pub extrapolated_forward: u64,
    pub repaired: u64,
}

impl InferenceStats {
    pub fn record(&mut self, inferred: &InferredStopTimes) {
        self.trips_corrected += 1;
        self.repaired += inferred.repaired as u64;
        for st in &inferred.stop_times {
            self.stop_times += 1;
            match st.provenance {
                Provenance::Matched => self.matched += 1,
                Provenance::Interpolated => self.interpolated += 1,
                Provenance::ExtrapolatedBackward => self.extrapolated_backward += 1,
                Provenance::ExtrapolatedForward => self.extrapolated_forward += 1,
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.trips_corrected += other.trips_corrected;
        self.trips_below_min_matches += other.trips_below_min_matches;
        self.stop_times += other.stop_times;
        self.matched += other.matched;
        self.interpolated += other.interpolated;
        self.extrapolated_backward += other.extrapolated_backward;
        self.extrapolated_forward += other.extrapolated_forward;
        self.repaired += other.repaired;
    }
}

/// The instant GTFS service times on `date` count from: noon local time
/// minus twelve hours, which is local midnight except on DST change days.
pub fn service_day_origin(date: NaiveDate, tz: Tz) -> DateTime<Utc> {
    let noon = date.and_time(NaiveTime::from_hms_opt(12, 0, 0).expect("valid time"));
    let local_noon = tz
        .from_local_datetime(&noon)
        .earliest()
        .expect("noon exists in every zone");
    local_noon.with_timezone(&Utc) - chrono::Duration::hours(12)
}

pub fn to_service_time(t: EpochTimestamp, service_date: NaiveDate, tz: Tz) -> Result<ServiceTime, InferenceError> {
    let offset = t.0 as i64 - service_day_origin(service_date, tz).timestamp();
    if !(-WINDOW_BEFORE_S..=WINDOW_AFTER_S).contains(&offset) {
        return Err(InferenceError::OutOfWindow { t, date: service_date });
    }
    if offset < 0 {
        return Err(InferenceError::BeforeServiceDay { t, date: service_date });
    }
    Ok(ServiceTime(offset as u32))
}

/// `num / den` rounded half up; `den` must be positive.
fn div_round_half_up(num: i64, den: i64) -> i64 {
    (2 * num + den).div_euclid(2 * den)
}

/// Fills every stop of `trip` from the observed times in `observed`
/// (keyed by stop_sequence, already strictly increasing).
///
/// Returns `Ok(None)` when fewer than `min_matches` stops were observed.
/// With `min_matches == 0` and nothing observed there is nothing to anchor
/// on, which is an error.
pub fn infer_stop_times(
    trip: &ScheduledTrip,
    observed: &BTreeMap<u32, ServiceTime>,
    min_matches: usize,
) -> Result<Option<InferredStopTimes>, InferenceError> {
    let obs: Vec<Option<i64>> = trip
        .stop_times
        .iter()
        .map(|st| observed.get(&st.stop_sequence).map(|r| r.0 as i64))
        .collect();
    let match_count = obs.iter().flatten().count();
    if match_count == 0 && min_matches == 0 {
        return Err(InferenceError::NoAnchors(trip.trip_id.clone()));
    }
    if match_count < min_matches {
        return Ok(None);
    }

    let sched: Vec<i64> = trip.stop_times.iter().map(|st| st.arrival.0 as i64).collect();
    let n = sched.len();

    let mut prev = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if obs[i].is_some() {
            last = Some(i);
        }
        prev[i] = last;
    }
    let mut next = vec![None; n];
    let mut last = None;
    for i in (0..n).rev() {
        if obs[i].is_some() {
            last = Some(i);
        }
        next[i] = last;
    }

    let mut stop_times = Vec::with_capacity(n);
    for (i, st) in trip.stop_times.iter().enumerate() {
        let t_n = sched[i];
        let (value, provenance) = if let Some(r) = obs[i] {
            (r, Provenance::Matched)
        } else {
            match (prev[i], next[i]) {
                (Some(p), Some(q)) => {
                    let (t_p, t_q) = (sched[p], sched[q]);
                    let (r_p, r_q) = (obs[p].unwrap(), obs[q].unwrap());
                    let v = if t_q == t_p {
                        r_p
                    } else {
                        r_p + div_round_half_up((t_n - t_p) * (r_q - r_p), t_q - t_p)
                    };
                    (v, Provenance::Interpolated)
                }
                (None, Some(q)) => (t_n + (obs[q].unwrap() - sched[q]), Provenance::ExtrapolatedBackward),
                (Some(p), None) => (t_n + (obs[p].unwrap() - sched[p]), Provenance::ExtrapolatedForward),
                (None, None) => unreachable!("at least one stop is matched"),
            }
        };
        stop_times.push(CorrectedStopTime {
            stop_id: st.stop_id.clone(),
            stop_sequence: st.stop_sequence,
            scheduled: st.arrival,
            corrected: ServiceTime(value.clamp(0, u32::MAX as i64) as u32),
            provenance,
            repaired: false,
        });
    }

    let mut repaired = 0;
    for i in 1..stop_times.len() {
        let floor = stop_times[i - 1].corrected.0;
        if stop_times[i].corrected.0 <= floor {
            stop_times[i].corrected = ServiceTime(floor + 1);
            stop_times[i].repaired = true;
            repaired += 1;
        }
    }

    Ok(Some(InferredStopTimes { stop_times, match_count, repaired }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScheduledStopTime;
    use proptest::prelude::*;

    fn hms(s: &str) -> ServiceTime {
        s.parse().unwrap()
    }

    fn trip(seq_start: u32, times: &[&str]) -> ScheduledTrip {
        ScheduledTrip {
            trip_id: "T".into(),
            route_id: "R".into(),
            service_id: "S".into(),
            shape_id: None,
            headsign: None,
            direction_id: None,
            stop_times: times
                .iter()
                .enumerate()
                .map(|(i, t)| ScheduledStopTime {
                    trip_id: "T".into(),
                    stop_id: format!("S{}", seq_start + i as u32),
                    stop_sequence: seq_start + i as u32,
                    arrival: hms(t),
                    departure: hms(t),
                })
                .collect(),
        }
    }

    fn corrected(out: &InferredStopTimes) -> Vec<String> {
        out.stop_times.iter().map(|s| s.corrected.to_string()).collect()
    }

    #[test]
    fn interpolates_between_matched_neighbours() {
        let t = trip(1, &["14:25:00", "14:26:00", "14:27:00"]);
        let obs = BTreeMap::from([(1, hms("14:27:02")), (3, hms("14:30:06"))]);
        let out = infer_stop_times(&t, &obs, 1).unwrap().unwrap();
        assert_eq!(corrected(&out), ["14:27:02", "14:28:34", "14:30:06"]);
        assert_eq!(out.stop_times[1].provenance, Provenance::Interpolated);
        assert_eq!(out.match_count, 2);
    }

    #[test]
    fn extrapolates_backward_from_first_match() {
        let t = trip(1, &["14:25:00", "14:26:00"]);
        let out = infer_stop_times(&t, &BTreeMap::from([(2, hms("14:28:00"))]), 1).unwrap().unwrap();
        assert_eq!(corrected(&out), ["14:27:00", "14:28:00"]);
        assert_eq!(out.stop_times[0].provenance, Provenance::ExtrapolatedBackward);
    }

    #[test]
    fn extrapolates_forward_from_last_match() {
        let t = trip(29, &["15:23:00", "15:24:00"]);
        let out = infer_stop_times(&t, &BTreeMap::from([(29, hms("15:25:00"))]), 1).unwrap().unwrap();
        assert_eq!(corrected(&out), ["15:25:00", "15:26:00"]);
        assert_eq!(out.stop_times[1].provenance, Provenance::ExtrapolatedForward);
    }

    #[test]
    fn on_time_everywhere_is_identity() {
        let times = ["08:00:00", "08:03:00", "08:07:30", "08:10:00"];
        let t = trip(1, &times);
        let obs = t.stop_times.iter().map(|s| (s.stop_sequence, s.arrival)).collect();
        let out = infer_stop_times(&t, &obs, 1).unwrap().unwrap();
        assert_eq!(corrected(&out), times);
        assert!(out.stop_times.iter().all(|s| s.provenance == Provenance::Matched));
    }

    #[test]
    fn single_anchor_shifts_whole_trip() {
        let t = trip(1, &["10:00:00", "10:02:00", "10:05:00", "10:09:00"]);
        let out = infer_stop_times(&t, &BTreeMap::from([(3, hms("10:06:30"))]), 1).unwrap().unwrap();
        assert_eq!(corrected(&out), ["10:01:30", "10:03:30", "10:06:30", "10:10:30"]);
    }

    #[test]
    fn below_minimum_yields_nothing() {
        let t = trip(1, &["10:00:00", "10:02:00"]);
        assert_eq!(infer_stop_times(&t, &BTreeMap::from([(1, hms("10:00:00"))]), 2).unwrap(), None);
        assert_eq!(infer_stop_times(&t, &BTreeMap::new(), 1).unwrap(), None);
        assert!(matches!(infer_stop_times(&t, &BTreeMap::new(), 0), Err(InferenceError::NoAnchors(_))));
    }

    #[test]
    fn zero_scheduled_gap_takes_upstream_value_then_repairs() {
        let t = trip(1, &["10:00:00", "10:00:00", "10:00:00"]);
        let obs = BTreeMap::from([(1, hms("10:01:00")), (3, hms("10:02:00"))]);
        let out = infer_stop_times(&t, &obs, 1).unwrap().unwrap();
        // r̂ = r_p, then bumped one second past its predecessor
        assert_eq!(corrected(&out), ["10:01:00", "10:01:01", "10:02:00"]);
        assert_eq!(out.repaired, 1);
        assert!(out.stop_times[1].repaired);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(div_round_half_up(5, 2), 3);
        assert_eq!(div_round_half_up(4, 3), 1);
        assert_eq!(div_round_half_up(-5, 2), -2);
        assert_eq!(div_round_half_up(184 * 60, 120), 92);
    }

    #[test]
    fn backward_extrapolation_clamps_at_zero() {
        let t = trip(1, &["00:00:10", "00:05:00"]);
        let out = infer_stop_times(&t, &BTreeMap::from([(2, hms("00:02:00"))]), 1).unwrap().unwrap();
        assert_eq!(out.stop_times[0].corrected, ServiceTime(0));
    }

    #[test]
    fn service_time_conversion() {
        let tz = chrono_tz::Europe::London;
        let date = NaiveDate::from_ymd_opt(2025, 7, 8).unwrap();
        let local = |d: u32, h, m, s| {
            tz.with_ymd_and_hms(2025, 7, d, h, m, s).unwrap().timestamp() as u64
        };
        assert_eq!(to_service_time(EpochTimestamp(local(8, 14, 27, 2)), date, tz), Ok(ServiceTime(52022)));
        assert_eq!(to_service_time(EpochTimestamp(local(9, 0, 30, 0)), date, tz), Ok(ServiceTime(88200)));
        assert!(matches!(
            to_service_time(EpochTimestamp(local(10, 14, 0, 0)), date, tz),
            Err(InferenceError::OutOfWindow { .. })
        ));
        assert!(matches!(
            to_service_time(EpochTimestamp(local(7, 23, 0, 0)), date, tz),
            Err(InferenceError::BeforeServiceDay { .. })
        ));
    }

    #[test]
    fn dst_day_origin_is_noon_minus_twelve() {
        // 2025-03-30: clocks go forward at 01:00 GMT in London
        let tz = chrono_tz::Europe::London;
        let date = NaiveDate::from_ymd_opt(2025, 3, 30).unwrap();
        let noon = tz.with_ymd_and_hms(2025, 3, 30, 12, 0, 0).unwrap().timestamp();
        assert_eq!(service_day_origin(date, tz).timestamp(), noon - 12 * 3600);
    }

    /// Straightforward re-statement of the three estimators, scanning for the
    /// neighbours directly instead of precomputing them.
    fn oracle(sched: &[i64], obs: &[Option<i64>]) -> Vec<i64> {
        (0..sched.len())
            .map(|n| {
                if let Some(r) = obs[n] {
                    return r;
                }
                let p = (0..n).rev().find(|&i| obs[i].is_some());
                let q = (n + 1..sched.len()).find(|&i| obs[i].is_some());
                match (p, q) {
                    (Some(p), Some(q)) => {
                        let (rp, rq) = (obs[p].unwrap() as f64, obs[q].unwrap() as f64);
                        let (tp, tq, tn) = (sched[p] as f64, sched[q] as f64, sched[n] as f64);
                        if tq == tp {
                            rp as i64
                        } else {
                            (rp + ((tn - tp) / (tq - tp) * (rq - rp) + 0.5).floor()) as i64
                        }
                    }
                    (None, Some(q)) => sched[n] + obs[q].unwrap() - sched[q],
                    (Some(p), None) => sched[n] + obs[p].unwrap() - sched[p],
                    _ => unreachable!(),
                }
            })
            .collect()
    }

    fn arb_trip() -> impl Strategy<Value = (Vec<i64>, Vec<Option<i64>>)> {
        (2usize..40)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(30i64..400, n),
                    proptest::collection::vec(proptest::bool::weighted(0.4), n),
                    proptest::collection::vec(-120i64..600, n),
                )
            })
            .prop_filter_map("need a match", |(gaps, mask, delays)| {
                if !mask.iter().any(|&b| b) {
                    return None;
                }
                let mut t = 36_000;
                let sched: Vec<i64> = gaps.iter().map(|g| { t += g; t }).collect();
                // observed = schedule + cumulative delay, kept strictly increasing
                let mut last = 0;
                let obs = sched
                    .iter()
                    .zip(&delays)
                    .zip(&mask)
                    .map(|((s, d), &m)| {
                        let v = (s + d).max(last + 1);
                        last = v;
                        m.then_some(v)
                    })
                    .collect();
                Some((sched, obs))
            })
    }

    fn build(sched: &[i64], obs: &[Option<i64>]) -> (ScheduledTrip, BTreeMap<u32, ServiceTime>) {
        let mut t = trip(1, &[]);
        for (i, &s) in sched.iter().enumerate() {
            t.stop_times.push(ScheduledStopTime {
                trip_id: "T".into(),
                stop_id: format!("S{i}"),
                stop_sequence: i as u32 * 2 + 1,
                arrival: ServiceTime(s as u32),
                departure: ServiceTime(s as u32),
            });
        }
        let observed = obs
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|v| (i as u32 * 2 + 1, ServiceTime(v as u32))))
            .collect();
        (t, observed)
    }

    proptest! {
        #[test]
        fn agrees_with_direct_formulas((sched, obs) in arb_trip()) {
            let (t, observed) = build(&sched, &obs);
            let out = infer_stop_times(&t, &observed, 1).unwrap().unwrap();
            let expect = oracle(&sched, &obs);
            if out.repaired == 0 {
                let got: Vec<i64> = out.stop_times.iter().map(|s| s.corrected.0 as i64).collect();
                prop_assert_eq!(got, expect);
            }
            prop_assert!(out.stop_times.windows(2).all(|w| w[0].corrected < w[1].corrected));
            // repair may push a matched stop when its predecessors were squeezed
            for (st, o) in out.stop_times.iter().zip(&obs) {
                if let Some(v) = o {
                    prop_assert_eq!(st.provenance, Provenance::Matched);
                    prop_assert!(st.corrected.0 as i64 == *v || out.repaired > 0);
                }
            }
        }

        #[test]
        fn interpolation_stays_between_neighbours((sched, obs) in arb_trip()) {
            let (t, observed) = build(&sched, &obs);
            let out = infer_stop_times(&t, &observed, 1).unwrap().unwrap();
            let anchors: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].is_some()).collect();
            for w in anchors.windows(2) {
                let (p, q) = (w[0], w[1]);
                for n in p + 1..q {
                    let v = out.stop_times[n].corrected.0 as i64;
                    prop_assert!(obs[p].unwrap() < v && v < obs[q].unwrap() || out.repaired > 0);
                }
            }
        }

        #[test]
        fn extrapolation_keeps_scheduled_gaps((sched, obs) in arb_trip()) {
            let (t, observed) = build(&sched, &obs);
            let out = infer_stop_times(&t, &observed, 1).unwrap().unwrap();
            let first = obs.iter().position(Option::is_some).unwrap();
            let last = obs.iter().rposition(Option::is_some).unwrap();
            for i in (1..=first).chain(last + 1..sched.len()) {
                let gap = out.stop_times[i].corrected.0 as i64 - out.stop_times[i - 1].corrected.0 as i64;
                let clamped = out.stop_times[..=i].iter().any(|s| s.corrected.0 == 0);
                prop_assert!(gap == sched[i] - sched[i - 1] || clamped || out.repaired > 0);
            }
        }

        #[test]
        fn endpoints_are_exact(tp in 0i64..50_000, gap in 1i64..3_600, rp in 0i64..50_000, span in 1i64..7_200) {
            let sched = [tp, tp, tp + gap, tp + gap];
            let obs = [Some(rp), None, None, Some(rp + span)];
            let (t, observed) = build(&sched, &obs);
            let out = infer_stop_times(&t, &observed, 1).unwrap().unwrap();
            // t_n == t_p gives r_p before repair, t_n == t_q gives r_q
            prop_assert_eq!(out.stop_times[1].corrected.0 as i64, (rp + 1).max(rp));
            prop_assert!(out.stop_times[1].repaired);
            let q_side = out.stop_times[2].corrected.0 as i64;
            prop_assert!(q_side == rp + span || out.stop_times[2].repaired);
        }
    }
}
