use thiserror::Error;

use crate::geom::BsId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// UE and BS share (nearly) the same horizontal coordinates, so the
    /// azimuth and its derivatives are undefined.
    #[error("degenerate geometry: horizontal range {horizontal_range:e} m is below the singularity threshold")]
    DegenerateGeometry { horizontal_range: f64 },

    /// A measured 3D range is shorter than the known height difference.
    #[error("inconsistent geometry: range {range} m is shorter than height difference {delta_z} m")]
    InconsistentGeometry { range: f64, delta_z: f64 },

    #[error("a 3D fix needs an elevation angle")]
    MissingElevation,

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("covariance is not positive semi-definite")]
    NonPsdCovariance,

    #[error("state estimate became non-finite")]
    NonFinite,

    #[error("no base station admitted this epoch")]
    NoVisibleBs,

    #[error("duplicate base station id {0}")]
    DuplicateBs(BsId),

    #[error("infeasible speed profile: {0}")]
    InfeasibleProfile(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("error series is empty")]
    EmptySeries,

    #[error("malformed epoch record on line {line}: {reason}")]
    Stream { line: usize, reason: String },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGeometry { .. }
                | Error::SingularInnovation
                | Error::NonPsdCovariance
                | Error::NonFinite
        )
    }
}
