//! Multi-BS 5G positioning: geometry, Bayesian filters, centralized and
//! decentralized fusion, a synthetic scenario generator and the
//! linearization-error studies.

pub mod analysis;
pub mod error;
pub mod filters;
pub mod fusion;
pub mod geom;
pub mod sim;

pub use error::{Error, Result};
pub use fusion::{FusionConfig, SchemeId, Tracker};
pub use sim::{MeasurementMode, ScenarioConfig};
