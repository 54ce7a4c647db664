use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{Dynamics, VehicleParams};
use super::render::render;
use super::{EnvLatent, LaneError, LaneState, SafetySpec, BRIGHTNESS_RANGE, LANE_WIDTH_RANGE};
use crate::rng::uniform;

/// Half-widths of a uniform box of states centered on the lane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRanges {
    pub d: f64,
    pub theta: f64,
}

impl Default for StateRanges {
    /// The initial-state distribution: `d ~ U(-0.8, 0.8)`, `theta ~ U(-0.15, 0.15)`.
    fn default() -> Self {
        Self { d: 0.8, theta: 0.15 }
    }
}

pub fn sample_state(rng: &mut ChaCha8Rng, ranges: &StateRanges) -> LaneState {
    let d = uniform(rng, -ranges.d, ranges.d);
    let theta = uniform(rng, -ranges.theta, ranges.theta);
    LaneState { d, theta }
}

pub fn sample_initial(rng: &mut ChaCha8Rng) -> LaneState {
    sample_state(rng, &StateRanges::default())
}

pub fn sample_env(rng: &mut ChaCha8Rng) -> EnvLatent {
    let brightness = uniform(rng, BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1);
    let lane_width = uniform(rng, LANE_WIDTH_RANGE.0, LANE_WIDTH_RANGE.1);
    let texture_phase = uniform(rng, 0.0, TAU);
    EnvLatent {
        brightness,
        lane_width,
        texture_phase,
    }
}

/// The proportional expert `clamp(-0.74 d - 0.44 theta)`.
pub fn anchor_policy_state(params: &VehicleParams, s: LaneState) -> f64 {
    (-0.74 * s.d - 0.44 * s.theta).clamp(-params.max_steer, params.max_steer)
}

/// Per-step reward `1 - min(1, |d| / beta)`.
pub fn reward(s: LaneState, beta: f64) -> f64 {
    1.0 - (s.d.abs() / beta).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `s_0 .. s_T`.
    pub states: Vec<LaneState>,
    pub actions: Vec<f64>,
    pub total_reward: f64,
    /// First step `t >= 1` with `|d_t| > beta`.
    pub first_unsafe: Option<usize>,
}

/// Runs the camera-in-the-loop system for `steps` steps.
///
/// The policy sees rendered images; its output is clamped to the steering
/// limit before the plant step. Rewards are collected for `s_1 .. s_T`.
pub fn rollout(
    policy: &mut dyn FnMut(&[f64]) -> f64,
    dynamics: &VehicleParams,
    spec: &SafetySpec,
    s0: LaneState,
    env: &EnvLatent,
    steps: usize,
) -> Result<Rollout, LaneError> {
    if steps == 0 {
        return Err(LaneError::Config("rollout needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    states.push(s0);
    let mut s = s0;
    let mut total = 0.0;
    let mut first_unsafe = None;
    for t in 1..=steps {
        let u = policy(&render(s, env));
        if !u.is_finite() {
            return Err(LaneError::NonFinitePolicy {
                step: t - 1,
                value: u,
                state: s,
            });
        }
        let u = u.clamp(-dynamics.max_steer, dynamics.max_steer);
        s = dynamics.step(s, u);
        total += reward(s, spec.beta);
        if first_unsafe.is_none() && !spec.is_safe(s) {
            first_unsafe = Some(t);
        }
        actions.push(u);
        states.push(s);
    }
    Ok(Rollout {
        states,
        actions,
        total_reward: total,
        first_unsafe,
    })
}
