//! Synthetic lane-keeping environment: a procedural camera renderer, path-relative
//! bicycle dynamics, the safety predicate, initial-state sampling and rollouts.

mod dataset;
mod dynamics;
mod episode;
mod render;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, write_dataset_csv, Sample, DATASET_MAGIC,
};
pub use dynamics::{steer_clamp_count, Dynamics, VehicleParams};
pub use episode::{
    anchor_policy_state, reward, rollout, sample_env, sample_initial, sample_state, Rollout,
    StateRanges,
};
pub use render::{render, IMAGE_COLS, IMAGE_DIM, IMAGE_ROWS};

use crate::boundprop::BoundError;

/// Path-relative vehicle state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneState {
    /// Cross-track error in meters.
    pub d: f64,
    /// Heading error in radians.
    pub theta: f64,
}

impl LaneState {
    pub fn new(d: f64, theta: f64) -> Self {
        Self { d, theta }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.d, self.theta]
    }
}

/// Unobserved appearance variation of the scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvLatent {
    pub brightness: f64,
    pub lane_width: f64,
    pub texture_phase: f64,
}

pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const LANE_WIDTH_RANGE: (f64, f64) = (0.08, 0.16);

impl EnvLatent {
    pub fn nominal() -> Self {
        Self {
            brightness: 0.0,
            lane_width: 0.12,
            texture_phase: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        (BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1).contains(&self.brightness)
            && (LANE_WIDTH_RANGE.0..=LANE_WIDTH_RANGE.1).contains(&self.lane_width)
            && (0.0..std::f64::consts::TAU).contains(&self.texture_phase)
    }
}

/// Keep `|d| <= beta` for `horizon` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub beta: f64,
    pub horizon: usize,
}

impl Default for SafetySpec {
    fn default() -> Self {
        Self {
            beta: 1.0,
            horizon: 10,
        }
    }
}

impl SafetySpec {
    pub fn validate(&self) -> Result<(), LaneError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || self.horizon == 0 {
            return Err(LaneError::Config(format!(
                "safety spec needs beta > 0 and horizon >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_safe(&self, s: LaneState) -> bool {
        s.d.abs() <= self.beta
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LaneError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("policy returned {value} at step {step} from state {state:?}")]
    NonFinitePolicy {
        step: usize,
        value: f64,
        state: LaneState,
    },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
