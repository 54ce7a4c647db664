//! Run configuration: one TOML file with a section per stage, overridable
//! from the environment as `SPVT_<SECTION>_<KEY>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spvt::boundprop::BoundMethod;
use spvt::laneworld::{SafetySpec, VehicleParams};
use spvt::perception::{GeneratorConfig, SearchSettings};
use spvt::train::{AnchorConfig, TrainConfig};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SPVT_";

const SECTIONS: [&str; 9] = [
    "run",
    "environment",
    "dataset",
    "generator",
    "search",
    "anchor",
    "spvt",
    "verification",
    "evaluation",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Vehicle and safety predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentConfig {
    pub v: f64,
    pub lf: f64,
    pub lr: f64,
    pub dt: f64,
    pub max_steer: f64,
    pub beta: f64,
    pub horizon: usize,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        let p = VehicleParams::default();
        let s = SafetySpec::default();
        Self {
            v: p.v,
            lf: p.lf,
            lr: p.lr,
            dt: p.dt,
            max_steer: p.max_steer,
            beta: s.beta,
            horizon: s.horizon,
        }
    }
}

impl EnvironmentConfig {
    pub fn vehicle(&self) -> VehicleParams {
        VehicleParams {
            v: self.v,
            lf: self.lf,
            lr: self.lr,
            dt: self.dt,
            max_steer: self.max_steer,
        }
    }

    pub fn safety(&self) -> SafetySpec {
        SafetySpec {
            beta: self.beta,
            horizon: self.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Rendered pairs for generator training and anchor demonstrations.
    pub n: usize,
    /// Fresh images for residual estimation and the latent-size sweep.
    pub heldout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n: 20_000, heldout: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonPolicy {
    /// Largest held-out residual; keeps the certificate sound.
    Max,
    /// 95th percentile; the certificate is then heuristic.
    Q95,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub n: usize,
    pub delta: f64,
    pub k: usize,
    pub method: BoundMethod,
    pub epsilon_policy: EpsilonPolicy,
    /// Fixed residual; overrides the run's estimate and the policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Model role in the run directory, or a weight-file path.
    pub controller: String,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            delta: 0.05,
            k: 10,
            method: BoundMethod::Ibp,
            epsilon_policy: EpsilonPolicy::Max,
            epsilon: None,
            controller: "spvt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub steps: usize,
    pub controller: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            steps: 200,
            controller: "spvt".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub environment: EnvironmentConfig,
    pub dataset: DatasetConfig,
    pub generator: GeneratorConfig,
    pub search: SearchSettings,
    pub anchor: AnchorConfig,
    pub spvt: TrainConfig,
    pub verification: VerificationConfig,
    pub evaluation: EvaluationConfig,
}

/// An override value is read as a TOML literal when it parses as one
/// (`3`, `1e-3`, `true`, `[4, 8]`, `{ d = 1.0, theta = 0.2 }`) and as a
/// plain string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let (section, key) = rest
            .split_once('_')
            .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
            .ok_or_else(|| {
                CliError::Config(format!(
                    "{name}: expected {ENV_PREFIX}<SECTION>_<KEY> with SECTION one of {}",
                    SECTIONS.join(", ")
                ))
            })?;
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(sec) = entry else {
            return Err(CliError::Config(format!("[{section}] is not a table")));
        };
        sec.insert(key.to_string(), parse_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies overrides from `vars`
    /// and validates the result.
    pub fn load(
        path: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, vars)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.environment.safety().validate()?;
        let v = self.environment.vehicle();
        if ![v.v, v.lf, v.lr, v.dt, v.max_steer].iter().all(|x| *x > 0.0 && x.is_finite()) {
            return Err(CliError::Config(format!("vehicle parameters must be positive: {v:?}")));
        }
        self.generator.validate()?;
        self.anchor.validate()?;
        self.spvt.validate(self.environment.horizon)?;
        if self.dataset.n == 0 || self.dataset.heldout == 0 {
            return Err(CliError::Config("dataset.n and dataset.heldout must be positive".into()));
        }
        if self.evaluation.episodes == 0 || self.evaluation.steps == 0 {
            return Err(CliError::Config("evaluation needs episodes >= 1 and steps >= 1".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, enough to rerun a command.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always serializable")
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.snapshot().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_the_snapshot() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[spvt]\nlambda3 = 1.0\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), vec![]), Err(CliError::Config(_))));
        std::fs::write(&p, "[telemetry]\nx = 1\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), vec![]), Err(CliError::Config(_))));
    }

    #[test]
    fn environment_overrides_win() {
        let cfg = RunConfig::load(
            None,
            vars(&[
                ("SPVT_RUN_SEED", "7"),
                ("SPVT_SPVT_LR_START", "1e-3"),
                ("SPVT_SPVT_K_SCHEDULE", "[5, 10]"),
                ("SPVT_VERIFICATION_METHOD", "crown"),
                ("SPVT_ANCHOR_STATE_RANGES", "{ d = 0.5, theta = 0.1 }"),
                ("PATH", "/usr/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.spvt.lr_start, 1e-3);
        assert_eq!(cfg.spvt.k_schedule, vec![5, 10]);
        assert_eq!(cfg.verification.method, BoundMethod::Crown);
        assert_eq!(cfg.anchor.state_ranges.d, 0.5);
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        for (k, v) in [("SPVT_NOPE_X", "1"), ("SPVT_SPVT_NOT_A_FIELD", "1"), ("SPVT_RUN_SEED", "seven")] {
            assert!(matches!(RunConfig::load(None, vars(&[(k, v)])), Err(CliError::Config(_))), "{k}");
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        let r = RunConfig::load(None, vars(&[("SPVT_SPVT_K_SCHEDULE", "[4, 8]")]));
        assert!(matches!(r, Err(CliError::Config(_))));
    }
}
