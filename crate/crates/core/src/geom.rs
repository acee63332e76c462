//! Range/azimuth measurement models, single-BS position fixing and the NLOS gate.
//!
//! Conventions used throughout the crate:
//! - offsets are `UE - BS`,
//! - azimuth is `atan2(dy, dx)`, measured from the +x (east) axis, in (-π, π],
//! - elevation is `atan2(dz, r_2d)`,
//! - all angles are radians.
//!
//! `fix_2d`/`fix_3d` invert `measure` exactly under this convention.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{Matrix2x4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizontal ranges below this are treated as the azimuth singularity.
pub const DEGENERATE_HORIZONTAL_RANGE: f64 = 1e-6;

/// Default threshold of the TOA/RSS range comparison.
pub const DEFAULT_NLOS_EPSILON: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn horizontal(&self) -> Position2 {
        Position2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position2 {
    pub x: f64,
    pub y: f64,
}

impl Position2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn with_height(&self, z: f64) -> Position3 {
        Position3::new(self.x, self.y, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BsId(pub u32);

impl fmt::Display for BsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bs{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsSite {
    pub id: BsId,
    pub pos: Position3,
}

impl BsSite {
    pub const fn new(id: u32, pos: Position3) -> Self {
        Self { id: BsId(id), pos }
    }
}

/// One BS's geometric observables of the UE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeAngle {
    /// 3D range, meters.
    pub range: f64,
    /// Azimuth, radians.
    pub azimuth: f64,
    /// Elevation, radians.
    pub elevation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlosInputs {
    pub r_toa: f64,
    pub r_rss: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LosVerdict {
    Los,
    Nlos,
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

pub fn range_3d(ue: &Position3, bs: &Position3) -> f64 {
    let (dx, dy, dz) = (ue.x - bs.x, ue.y - bs.y, ue.z - bs.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn checked_horizontal(dx: f64, dy: f64) -> Result<f64> {
    let horizontal_range = dx.hypot(dy);
    if horizontal_range < DEGENERATE_HORIZONTAL_RANGE {
        return Err(Error::DegenerateGeometry { horizontal_range });
    }
    Ok(horizontal_range)
}

fn atan2_half_open(dy: f64, dx: f64) -> f64 {
    // atan2 returns -π for (−0, negative); fold it onto +π.
    let a = dy.atan2(dx);
    if a <= -PI {
        PI
    } else {
        a
    }
}

pub fn azimuth(ue: &Position3, bs: &Position3) -> Result<f64> {
    let (dx, dy) = (ue.x - bs.x, ue.y - bs.y);
    checked_horizontal(dx, dy)?;
    Ok(atan2_half_open(dy, dx))
}

/// Horizontal range from a 3D range and a known height difference.
pub fn range_2d(range3: f64, delta_z: f64) -> Result<f64> {
    let dz = delta_z.abs();
    if range3 < dz {
        return Err(Error::InconsistentGeometry {
            range: range3,
            delta_z,
        });
    }
    Ok(((range3 - dz) * (range3 + dz)).sqrt())
}

/// Noise-free forward model: what `bs` would observe of a UE at `ue`.
pub fn measure(bs: &BsSite, ue: &Position3) -> Result<RangeAngle> {
    let (dx, dy, dz) = (ue.x - bs.pos.x, ue.y - bs.pos.y, ue.z - bs.pos.z);
    let horizontal = checked_horizontal(dx, dy)?;
    Ok(RangeAngle {
        range: range_3d(ue, &bs.pos),
        azimuth: atan2_half_open(dy, dx),
        elevation: Some(dz.atan2(horizontal)),
    })
}

/// Horizontal position fix from one BS's range and azimuth, given the UE height.
pub fn fix_2d(bs: &BsSite, meas: &RangeAngle, ue_height: f64) -> Result<Position2> {
    let r2d = range_2d(meas.range, ue_height - bs.pos.z)?;
    let (sin, cos) = meas.azimuth.sin_cos();
    Ok(Position2::new(bs.pos.x + r2d * cos, bs.pos.y + r2d * sin))
}

/// 3D position fix from one BS's range, azimuth and elevation.
pub fn fix_3d(bs: &BsSite, meas: &RangeAngle) -> Result<Position3> {
    let elevation = meas.elevation.ok_or(Error::MissingElevation)?;
    let (sin_el, cos_el) = elevation.sin_cos();
    let (sin_az, cos_az) = meas.azimuth.sin_cos();
    let horizontal = meas.range * cos_el;
    Ok(Position3::new(
        bs.pos.x + horizontal * cos_az,
        bs.pos.y + horizontal * sin_az,
        bs.pos.z + meas.range * sin_el,
    ))
}

/// LOS iff the time-based range exceeds the power-based range by at most
/// `epsilon`. One-sided: a TOA range shorter than the RSS range is LOS.
pub fn detect_nlos(inputs: &NlosInputs) -> LosVerdict {
    if inputs.r_toa - inputs.r_rss <= inputs.epsilon {
        LosVerdict::Los
    } else {
        LosVerdict::Nlos
    }
}

/// Horizontal range and azimuth of the state's position relative to `bs`.
pub fn horizontal_observation(state_mean: &Vector4<f64>, bs: &BsSite) -> Result<(f64, f64)> {
    let (dx, dy) = (state_mean[0] - bs.pos.x, state_mean[1] - bs.pos.y);
    let r = checked_horizontal(dx, dy)?;
    Ok((r, atan2_half_open(dy, dx)))
}

/// Gradient of (horizontal range, azimuth) with respect to `[x, y, vx, vy]`.
pub fn jacobian_rows(state_mean: &Vector4<f64>, bs: &BsSite) -> Result<Matrix2x4<f64>> {
    let (dx, dy) = (state_mean[0] - bs.pos.x, state_mean[1] - bs.pos.y);
    let r = checked_horizontal(dx, dy)?;
    let r2 = r * r;
    #[rustfmt::skip]
    let rows = Matrix2x4::new(
        dx / r,   dy / r,  0.0, 0.0,
        -dy / r2, dx / r2, 0.0, 0.0,
    );
    Ok(rows)
}
