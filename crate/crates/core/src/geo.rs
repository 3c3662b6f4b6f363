//! Spherical geodesy used by the stop matcher.

use thiserror::Error;

use crate::model::GeoPoint;

/// Mean Earth radius (IUGG), meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Meters per degree of latitude used to express the matching radius as an
/// angular threshold.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("radius must be positive, got {0} m")]
    InvalidRadius(f64),
}

/// Haversine distance in meters.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat().to_radians();
    let phi2 = b.lat().to_radians();
    let d_phi = (b.lat() - a.lat()).to_radians();
    let d_lambda = (b.lon() - a.lon()).to_radians();

    let h = (d_phi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Converts a matching radius to the angular threshold of the coarse
/// bounding-box filter. `_at_latitude` is accepted for interface stability;
/// longitude convergence is handled by the filter's cosine term instead.
pub fn meters_to_angular_threshold(radius_m: f64, _at_latitude: f64) -> Result<f64, GeoError> {
    if !radius_m.is_finite() || radius_m <= 0.0 {
        return Err(GeoError::InvalidRadius(radius_m));
    }
    Ok(radius_m / METERS_PER_DEGREE)
}
