//! Conditional generator standing in for the camera, trained adversarially
//! on rendered data, plus the latent-search tools that measure how well it
//! covers real observations.

mod cgan;
mod latent;

use serde::{Deserialize, Serialize};

pub use cgan::{
    discriminator_init, generator_init, generator_input, heldout_l1, orthogonal_penalty, train_cgan,
    CganOutcome, EpochStats,
};
pub use latent::{
    estimate_epsilon, latent_search, latent_search_batch, validate_assumption,
    write_assumption_curve, write_epsilon_csv, AssumptionPoint, EpsilonReport, SearchResult,
    SearchSettings,
};

use crate::neural::NeuralError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Discriminator learning rate relative to the generator's.
    pub disc_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l1_weight: f64,
    pub adv_weight: f64,
    pub ortho_weight: f64,
    /// Fraction of the dataset kept aside for checkpoint selection.
    pub heldout_frac: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: vec![256; 4],
            disc_hidden: vec![128; 3],
            lr_start: 7e-4,
            lr_end: 5e-5,
            disc_lr_scale: 0.3,
            batch_size: 128,
            epochs: 100,
            l1_weight: 10.0,
            adv_weight: 1.0,
            ortho_weight: 1e-4,
            heldout_frac: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let weights = [self.l1_weight, self.adv_weight, self.ortho_weight, self.disc_lr_scale];
        if self.latent_dim == 0
            || self.hidden.is_empty()
            || self.batch_size == 0
            || weights.iter().any(|w| !(*w >= 0.0))
            || !(self.lr_start > 0.0 && self.lr_end > 0.0)
            || !(0.0..1.0).contains(&self.heldout_frac)
        {
            return Err(PerceptionError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: String,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
