//! Shared domain types: coordinates, timestamps, schedule entities and
//! vehicle observations.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("invalid GTFS time {0:?}")]
    Time(String),
}

/// A WGS84 coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(ModelError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(ModelError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Whole seconds since the Unix epoch, UTC.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EpochTimestamp(pub u64);

impl EpochTimestamp {
    pub fn seconds(self) -> u64 {
        self.0
    }
}

impl fmt::Display for EpochTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Seconds since midnight of a service day. Values at or past 86400 denote
/// post-midnight operation of the same service day and are never wrapped.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ServiceTime(pub u32);

impl ServiceTime {
    pub const fn from_hms(h: u32, m: u32, s: u32) -> Self {
        Self(h * 3600 + m * 60 + s)
    }

    pub fn seconds(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ServiceTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        write!(f, "{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
    }
}

impl FromStr for ServiceTime {
    type Err = ModelError;

    /// Parses `H:MM:SS` or `HH:MM:SS`; hours may exceed 23.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::Time(s.to_string());
        let mut parts = s.trim().split(':');
        let (h, m, sec) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(m), Some(sec), None) => (h, m, sec),
            _ => return Err(bad()),
        };
        if h.is_empty() || m.len() != 2 || sec.len() != 2 {
            return Err(bad());
        }
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        let sec: u32 = sec.parse().map_err(|_| bad())?;
        if m > 59 || sec > 59 {
            return Err(bad());
        }
        Ok(Self::from_hms(h, m, sec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub name: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledStopTime {
    pub trip_id: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub arrival: ServiceTime,
    pub departure: ServiceTime,
}

/// One timetabled run of a vehicle. `stop_times` is sorted by
/// `stop_sequence` and validated when the timetable is loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTrip {
    pub trip_id: String,
    pub route_id: String,
    pub service_id: String,
    pub shape_id: Option<String>,
    pub headsign: Option<String>,
    pub direction_id: Option<u8>,
    pub stop_times: Vec<ScheduledStopTime>,
}

impl ScheduledTrip {
    pub fn stop_time(&self, stop_sequence: u32) -> Option<&ScheduledStopTime> {
        self.stop_times
            .binary_search_by_key(&stop_sequence, |st| st.stop_sequence)
            .ok()
            .map(|i| &self.stop_times[i])
    }
}

/// One timestamped position report of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePositionRecord {
    pub observed_at: EpochTimestamp,
    pub vehicle_id: String,
    pub trip_id: Option<String>,
    pub route_id: Option<String>,
    pub position: GeoPoint,
    pub start_date: Option<NaiveDate>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geopoint_range_checks() {
        assert!(GeoPoint::new(90.0, 180.0).is_ok());
        assert!(GeoPoint::new(-90.0, -180.0).is_ok());
        assert_eq!(GeoPoint::new(90.5, 0.0), Err(ModelError::Latitude(90.5)));
        assert_eq!(GeoPoint::new(0.0, -181.0), Err(ModelError::Longitude(-181.0)));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn service_time_past_midnight_is_not_wrapped() {
        let t: ServiceTime = "25:10:00".parse().unwrap();
        assert_eq!(t.seconds(), 90600);
        assert_eq!(t.to_string(), "25:10:00");
        assert_eq!(ServiceTime(88200).to_string(), "24:30:00");
    }

    #[test]
    fn service_time_accepts_single_digit_hour() {
        assert_eq!("7:05:09".parse::<ServiceTime>().unwrap().seconds(), 25509);
        assert_eq!(ServiceTime(25509).to_string(), "07:05:09");
    }

    #[test]
    fn service_time_rejects_garbage() {
        for s in ["", "12:00", "12:60:00", "12:00:61", "a:00:00", "12:0:00", "1:00:00:00"] {
            assert!(s.parse::<ServiceTime>().is_err(), "{s}");
        }
    }
}
