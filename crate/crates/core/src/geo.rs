//! Spherical geometry and the speed-of-light constants shared by the
//! measurement and validation stages.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for all distance computations.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Speed of light in vacuum.
pub const SPEED_OF_LIGHT_KM_PER_S: f64 = 299_792.458;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
}

/// A validated latitude/longitude pair in decimal degrees.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoord", into = "RawCoord")]
pub struct Coord {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCoord {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawCoord> for Coord {
    type Error = GeoError;

    fn try_from(raw: RawCoord) -> Result<Self, Self::Error> {
        Coord::new(raw.lat, raw.lon)
    }
}

impl From<Coord> for RawCoord {
    fn from(c: Coord) -> Self {
        RawCoord {
            lat: c.lat,
            lon: c.lon,
        }
    }
}

impl Coord {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Coord { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn distance_km(&self, other: &Coord) -> f64 {
        great_circle_km(*self, *other)
    }

    /// Total order on (lat, lon), used for deterministic tie-breaking.
    pub fn total_cmp(&self, other: &Coord) -> Ordering {
        self.lat
            .total_cmp(&other.lat)
            .then(self.lon.total_cmp(&other.lon))
    }
}

impl fmt::Debug for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4})", self.lat, self.lon)
    }
}

/// Haversine distance on a sphere of radius [`EARTH_RADIUS_KM`].
///
/// Arguments are put in a canonical order first so the result is bit-for-bit
/// symmetric.
pub fn great_circle_km(a: Coord, b: Coord) -> f64 {
    let (a, b) = if a.total_cmp(&b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Point reached by travelling `distance_km` from `from` along the initial
/// bearing `bearing_deg` (clockwise from north).
pub fn destination(from: Coord, bearing_deg: f64, distance_km: f64) -> Coord {
    let d = distance_km / EARTH_RADIUS_KM;
    let b = bearing_deg.to_radians();
    let lat1 = from.lat.to_radians();
    let lon1 = from.lon.to_radians();
    let lat2 = (lat1.sin() * d.cos() + lat1.cos() * d.sin() * b.cos()).asin();
    let lon2 = lon1 + (b.sin() * d.sin() * lat1.cos()).atan2(d.cos() - lat1.sin() * lat2.sin());
    let lon = (lon2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    Coord {
        lat: lat2.to_degrees().clamp(-90.0, 90.0),
        lon: lon.clamp(-180.0, 180.0),
    }
}

/// Same as [`great_circle_km`] on raw degrees, rejecting out-of-range input.
pub fn try_great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64, GeoError> {
    Ok(great_circle_km(
        Coord::new(lat1, lon1)?,
        Coord::new(lat2, lon2)?,
    ))
}
