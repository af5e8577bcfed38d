use serde::Serialize;

use crate::dataset_io::Coord;
use crate::error::{Module, Result, TmoError};

pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Uniform,
    Bartlett,
}

impl Kernel {
    /// Weight at scaled distance u = d / bandwidth.
    pub fn weight(self, u: f64) -> f64 {
        match self {
            Kernel::Uniform => (u <= 1.0) as u8 as f64,
            Kernel::Bartlett => (1.0 - u).max(0.0),
        }
    }
}

/// Great-circle distance in miles between two points given in degrees.
pub fn haversine_miles(a: Coord, b: Coord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin()
}

pub(crate) fn validate_coords(coords: &[Coord]) -> Result<()> {
    for (i, c) in coords.iter().enumerate() {
        if !(c.lat.abs() <= 90.0 && c.lon.abs() <= 180.0) {
            return Err(TmoError::invalid(
                Module::Variance,
                format!("unit {i} has invalid coordinates ({}, {})", c.lat, c.lon),
            ));
        }
    }
    Ok(())
}
