//! Anchor imitation, safety-driven fine-tuning with an adaptive training set
//! and a horizon curriculum, and rollout evaluation.

mod adaptive;
mod anchor;
mod controller;
mod eval;
mod safety;
mod spvt;

use serde::{Deserialize, Serialize};

pub use adaptive::{sample_batch, update_adaptive_set, AdaptiveSet, Batch, BatchItem, QueueEntry};
pub use anchor::{expert_demonstrations, pretrain_anchor, AnchorOutcome, Demonstration};
pub use controller::{Controller, CONTROLLER_HIDDEN};
pub use eval::{evaluate, summarize_rewards, write_rewards_csv, EvalStats, RewardSummary};
pub use safety::{eta_score, safety_loss, safety_loss_value, SafetyTube};
pub use spvt::{combined_loss, spvt_train, write_metrics_csv, EpochMetrics, LossParts, LossWeights, SpvtContext, SpvtOutcome, Toggles};

use crate::boundprop::BoundError;
use crate::laneworld::{LaneError, StateRanges};
use crate::neural::{MlpNetwork, NeuralError};
use crate::verify::VerifyError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: String,
        /// Most recent checkpoint before the failure.
        last_good: Box<MlpNetwork>,
    },
    #[error("non-finite reach bounds from state (d = {d}, theta = {theta})")]
    NonFiniteBounds { d: f64, theta: f64 },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Lane(#[from] LaneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_frac: f64,
    /// Demonstration states are drawn from this wider box than the initial
    /// distribution, so the anchor also sees recovering states.
    pub state_ranges: StateRanges,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            hidden: CONTROLLER_HIDDEN.to_vec(),
            lr: 5e-4,
            batch_size: 256,
            epochs: 200,
            val_frac: 0.1,
            state_ranges: StateRanges { d: 1.0, theta: 0.15 },
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.hidden.is_empty()
            || self.batch_size == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.val_frac)
            || !(self.state_ranges.d >= 0.0 && self.state_ranges.theta >= 0.0)
        {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Where performance-loss observations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationSource {
    /// `g(s, z)` with fresh uniform latents.
    Generator,
    /// Rendered images with fresh appearance draws.
    Renderer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight, relative to the tube loss, of the penalty on the
    /// controller's pre-tanh bounds beyond `±saturation_margin`.
    pub saturation_weight: f64,
    pub saturation_margin: f64,
    pub k_schedule: Vec<usize>,
    pub sa_capacity: usize,
    pub pool_size: usize,
    pub p0: f64,
    pub p_step: f64,
    pub p_cap: f64,
    pub alpha: f64,
    pub warmup_epochs: usize,
    pub m_frac: f64,
    pub batch_size: usize,
    /// Elements per batch that enter the safety loss, chosen by eta.
    pub safety_batch: usize,
    pub batches_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    /// Pixel residual added around generator images in the tubes.
    pub epsilon: f64,
    pub observations: ObservationSource,
    /// Episodes per evaluation at stage ends; 0 disables it.
    pub eval_episodes: usize,
    pub eval_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.25,
            lambda2: 1.0,
            saturation_weight: 1e-4,
            saturation_margin: 2.0,
            k_schedule: vec![4, 6, 8, 10],
            sa_capacity: 4000,
            pool_size: 4000,
            p0: 0.5,
            p_step: 0.05,
            p_cap: 0.8,
            alpha: 1.0,
            warmup_epochs: 10,
            m_frac: 0.10,
            batch_size: 256,
            safety_batch: 32,
            batches_per_epoch: 16,
            lr_start: 8e-5,
            lr_end: 1e-5,
            epochs: 100,
            epsilon: 0.0,
            observations: ObservationSource::Generator,
            eval_episodes: 20,
            eval_steps: 200,
        }
    }
}

impl TrainConfig {
    /// Checks ranges and that the schedule ends at `horizon`.
    pub fn validate(&self, horizon: usize) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if [self.lambda1, self.lambda2, self.saturation_weight, self.saturation_margin, self.alpha, self.p_step]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return err("loss weights, the saturation margin, alpha and p_step must be finite and >= 0");
        }
        if self.k_schedule.is_empty()
            || self.k_schedule[0] == 0
            || self.k_schedule.windows(2).any(|w| w[0] >= w[1])
        {
            return err("k_schedule must be strictly increasing and positive");
        }
        if *self.k_schedule.last().unwrap() != horizon {
            return Err(TrainError::Config(format!(
                "k_schedule ends at {}, the safety horizon is {horizon}",
                self.k_schedule.last().unwrap()
            )));
        }
        if ![self.p0, self.p_cap].iter().all(|p| (0.0..=1.0).contains(p)) || self.p0 > self.p_cap {
            return err("need 0 <= p0 <= p_cap <= 1");
        }
        if !(0.0..=1.0).contains(&self.m_frac) {
            return err("m_frac must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.pool_size < self.batch_size || self.batches_per_epoch == 0 {
            return err("need batch_size >= 1, pool_size >= batch_size and batches_per_epoch >= 1");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return err("learning rates must be positive");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return err("epsilon must be finite and >= 0");
        }
        Ok(())
    }

    /// Curriculum stage active in `epoch`; stages split the epochs evenly.
    pub fn stage(&self, epoch: usize) -> usize {
        let n = self.k_schedule.len();
        (epoch * n / self.epochs.max(1)).min(n - 1)
    }

    /// Sampling share from the priority queue in a stage.
    pub fn p_at(&self, stage: usize) -> f64 {
        (self.p0 + stage as f64 * self.p_step).min(self.p_cap)
    }
}
