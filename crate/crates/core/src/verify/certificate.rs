use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::reach::{check_tube, reach_tubes, ClosedLoop};
use super::VerifyError;
use crate::boundprop::BoundMethod;
use crate::laneworld::{LaneState, SafetySpec};
use crate::neural::{encode_weights, MlpNetwork};

/// Initial states bounded together; keeps batches cache-sized.
const CERTIFY_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepResult {
    pub k: usize,
    pub verified_count: usize,
    pub fraction: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub n: usize,
    pub delta: f64,
    pub k: usize,
    pub per_step: Vec<StepResult>,
    pub epsilon: f64,
    pub bound_method: BoundMethod,
    pub generator_hash: String,
    pub controller_hash: String,
    pub seed: u64,
}

/// `clamp(v/n - sqrt(ln(2/delta) / 2n), 0, 1)`.
pub fn hoeffding_lower_bound(verified: usize, n: usize, delta: f64) -> f64 {
    let margin = ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt();
    (verified as f64 / n as f64 - margin).clamp(0.0, 1.0)
}

/// Hex SHA-256 of the SPVN encoding.
pub fn content_hash(net: &MlpNetwork) -> String {
    format!("{:x}", Sha256::digest(encode_weights(net)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertifySettings {
    pub delta: f64,
    pub k: usize,
    /// Recorded in the certificate; the caller drew the samples with it.
    pub seed: u64,
}

/// Verifies every sampled initial state for `k` steps and turns the counts
/// into population lower bounds holding with confidence `1 - delta`.
pub fn spv_certify(
    samples: &[LaneState],
    settings: &CertifySettings,
    lp: &ClosedLoop<'_>,
    spec: &SafetySpec,
) -> Result<Certificate, VerifyError> {
    let n = samples.len();
    if n < 2 {
        return Err(VerifyError::Contract(format!("need at least 2 initial states, got {n}")));
    }
    if !(settings.delta > 0.0 && settings.delta < 1.0) {
        return Err(VerifyError::Contract(format!("delta must lie in (0, 1), got {}", settings.delta)));
    }
    if settings.k == 0 {
        return Err(VerifyError::Contract("horizon K must be at least 1".into()));
    }
    let depths: Vec<Vec<usize>> = samples
        .par_chunks(CERTIFY_CHUNK)
        .map(|chunk| -> Result<Vec<usize>, VerifyError> {
            Ok(reach_tubes(chunk, settings.k, lp)?
                .iter()
                .map(|t| check_tube(t, spec).verified_upto)
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let depths: Vec<usize> = depths.into_iter().flatten().collect();
    let per_step = (1..=settings.k)
        .map(|k| {
            let v = depths.iter().filter(|&&d| d >= k).count();
            StepResult {
                k,
                verified_count: v,
                fraction: v as f64 / n as f64,
                lower_bound: hoeffding_lower_bound(v, n, settings.delta),
            }
        })
        .collect();
    Ok(Certificate {
        n,
        delta: settings.delta,
        k: settings.k,
        per_step,
        epsilon: lp.epsilon,
        bound_method: lp.method,
        generator_hash: content_hash(lp.generator),
        controller_hash: content_hash(&lp.controller.net),
        seed: settings.seed,
    })
}

impl Certificate {
    /// Rechecks the counts, fractions and bounds against each other.
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |what: String| Err(VerifyError::Contract(format!("inconsistent certificate: {what}")));
        if self.per_step.len() != self.k {
            return bad(format!("{} steps for K = {}", self.per_step.len(), self.k));
        }
        let mut prev = self.n;
        for (i, s) in self.per_step.iter().enumerate() {
            if s.k != i + 1 || s.verified_count > prev {
                return bad(format!("step {} (k = {}, V = {})", i + 1, s.k, s.verified_count));
            }
            prev = s.verified_count;
            let lb = hoeffding_lower_bound(s.verified_count, self.n, self.delta);
            if s.lower_bound != lb || s.fraction != s.verified_count as f64 / self.n as f64 || lb > s.fraction {
                return bad(format!("bound at k = {}", s.k));
            }
        }
        Ok(())
    }

    pub fn final_fraction(&self) -> f64 {
        self.per_step.last().map_or(0.0, |s| s.fraction)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate is always serializable")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), VerifyError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, VerifyError> {
        let cert: Certificate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cert.validate()?;
        Ok(cert)
    }

    /// Per-step table; `note` becomes a leading `#` comment line.
    pub fn write_csv(&self, path: &Path, note: Option<&str>) -> Result<(), VerifyError> {
        let mut file = std::fs::File::create(path)?;
        if let Some(note) = note {
            writeln!(file, "# {note}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        for s in &self.per_step {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_bound_is_clamped() {
        assert_eq!(hoeffding_lower_bound(0, 2000, 0.05), 0.0);
        assert_eq!(hoeffding_lower_bound(10, 10, 0.05), 1.0 - (40f64.ln() / 20.0).sqrt());
    }

    #[test]
    fn validate_catches_edits() {
        let mut c = Certificate {
            n: 10,
            delta: 0.05,
            k: 2,
            per_step: vec![
                StepResult {
                    k: 1,
                    verified_count: 9,
                    fraction: 0.9,
                    lower_bound: hoeffding_lower_bound(9, 10, 0.05),
                },
                StepResult {
                    k: 2,
                    verified_count: 7,
                    fraction: 0.7,
                    lower_bound: hoeffding_lower_bound(7, 10, 0.05),
                },
            ],
            epsilon: 0.1,
            bound_method: BoundMethod::Ibp,
            generator_hash: String::new(),
            controller_hash: String::new(),
            seed: 0,
        };
        c.validate().unwrap();
        c.per_step[1].verified_count = 10;
        assert!(c.validate().is_err());
    }
}
