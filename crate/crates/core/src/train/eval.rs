//! Camera-in-the-loop rollouts of a controller.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{Controller, TrainError};
use crate::laneworld::{rollout, sample_env, sample_initial, SafetySpec, VehicleParams};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub steps: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub unsafe_episodes: usize,
    #[serde(skip)]
    pub rewards: Vec<f64>,
}

/// Linear interpolation between order statistics of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mean and five-number summary of episode rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RewardSummary {
    pub episodes: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// `None` for an empty slice.
pub fn summarize_rewards(rewards: &[f64]) -> Option<RewardSummary> {
    if rewards.is_empty() {
        return None;
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(RewardSummary {
        episodes: rewards.len(),
        mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Episode `i` starts from a state and appearance drawn from its own stream
/// of `seed`, so results do not depend on how episodes are scheduled.
pub fn evaluate(
    controller: &Controller,
    params: &VehicleParams,
    spec: &SafetySpec,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalStats, TrainError> {
    if episodes == 0 || steps == 0 {
        return Err(TrainError::Contract("evaluation needs at least one episode and one step".into()));
    }
    let runs: Vec<(f64, bool)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "eval-episode", i as u64);
            let s0 = sample_initial(&mut rng);
            let env = sample_env(&mut rng);
            let mut policy = |img: &[f64]| controller.act(img).unwrap_or(f64::NAN);
            let r = rollout(&mut policy, params, spec, s0, &env, steps)?;
            Ok((r.total_reward, r.first_unsafe.is_some()))
        })
        .collect::<Result<_, TrainError>>()?;
    let rewards: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let sum = summarize_rewards(&rewards).expect("at least one episode");
    Ok(EvalStats {
        episodes,
        steps,
        mean: sum.mean,
        min: sum.min,
        q1: sum.q1,
        median: sum.median,
        q3: sum.q3,
        max: sum.max,
        unsafe_episodes: runs.iter().filter(|r| r.1).count(),
        rewards,
    })
}

/// One row per episode.
pub fn write_rewards_csv(stats: &EvalStats, path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "reward"])?;
    for (i, r) in stats.rewards.iter().enumerate() {
        w.write_record([i.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.25), 2.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile_sorted(&[7.0], 0.75), 7.0);
    }
}
