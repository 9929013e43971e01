//! Surface coordinates on the cylinder: lengthwise position in meters and
//! angle in radians.

use std::f64::consts::{PI, TAU};

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    wrap_periodic(x, TAU)
}

/// Wraps `x` into `[-period/2, period/2)`.
pub fn wrap_periodic(x: f64, period: f64) -> f64 {
    (x + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Maps an angle into `[0, 2π)`.
pub fn normalize_angle(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if y >= TAU {
        0.0
    } else {
        y
    }
}

/// A point on the cylinder surface.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurfacePoint {
    /// Lengthwise position, meters.
    pub l: f64,
    /// Angular position, radians.
    pub phi: f64,
}

impl SurfacePoint {
    pub fn new(l: f64, phi: f64) -> Self {
        Self { l, phi }
    }
}

/// Shortest distance over the unrolled surface, wrapping the angular offset.
pub fn geodesic_distance(a: SurfacePoint, b: SurfacePoint, radius: f64) -> f64 {
    let dl = b.l - a.l;
    let arc = radius * wrap_angle(b.phi - a.phi);
    (dl * dl + arc * arc).sqrt()
}

/// Half-turn helper for axial (π-periodic) angles.
pub fn wrap_axial(x: f64) -> f64 {
    wrap_periodic(x, PI)
}
