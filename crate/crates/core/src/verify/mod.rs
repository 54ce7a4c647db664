//! Closed-loop reachability through the generator and controller, safety
//! checks over the resulting tubes, and sampled certificates.

mod certificate;
mod reach;

pub use certificate::{content_hash, hoeffding_lower_bound, spv_certify, Certificate, CertifySettings, StepResult};
pub use reach::{check_tube, reach_step, reach_tube, reach_tubes, sigma_bounds, ClosedLoop, ReachTube, TubeCheck};

use crate::boundprop::BoundError;
use crate::neural::NeuralError;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
