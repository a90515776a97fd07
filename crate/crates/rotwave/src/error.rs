use thiserror::Error;

use crate::continuation::NewtonFailure;
use crate::lattice::SiteIndex;
use crate::phase::PhaseFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain size {0}: the wedge needs N >= 1")]
    InvalidDomainSize(usize),

    #[error("site {0} is outside the truncated wedge")]
    OutsideWedge(SiteIndex),

    #[error("radius argument {0} is negative")]
    NegativeRadius(f64),

    #[error("non-positive radius {radius} at site {site}")]
    NonPositiveRadius { site: SiteIndex, radius: f64 },

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("phase solve did not converge: {0}")]
    PhaseSolve(Box<PhaseFailure>),

    #[error("newton solve failed: {0}")]
    Newton(Box<NewtonFailure>),

    #[error("{0}")]
    Unsupported(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
