//! State/image datasets and their `SPVD` binary encoding.
//!
//! ```text
//! "SPVD" | count u64 | per record: d, theta, brightness, lane_width,
//!                                  texture_phase, 128 pixels   (all f64 LE)
//! ```

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::episode::{sample_env, sample_state, StateRanges};
use super::render::{render, IMAGE_DIM};
use super::{EnvLatent, LaneError, LaneState};
use crate::rng::stream;

pub const DATASET_MAGIC: &[u8; 4] = b"SPVD";
const RECORD_FLOATS: usize = 5 + IMAGE_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: LaneState,
    pub env: EnvLatent,
    pub image: Vec<f64>,
}

/// `n` rendered samples; record `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, seed: u64, ranges: &StateRanges) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, "dataset", i as u64);
            let state = sample_state(&mut rng, ranges);
            let env = sample_env(&mut rng);
            Sample {
                state,
                env,
                image: render(state, &env),
            }
        })
        .collect()
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<(), LaneError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        if s.image.len() != IMAGE_DIM {
            return Err(LaneError::Format(format!(
                "image has {} pixels, expected {IMAGE_DIM}",
                s.image.len()
            )));
        }
        let head = [
            s.state.d,
            s.state.theta,
            s.env.brightness,
            s.env.lane_width,
            s.env.texture_phase,
        ];
        for v in head.iter().chain(&s.image) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, LaneError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != DATASET_MAGIC {
        return Err(LaneError::Format("missing SPVD header".into()));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let expected = count
        .checked_mul(RECORD_FLOATS * 8)
        .ok_or_else(|| LaneError::Format(format!("record count {count} overflows")))?;
    if body.len() != expected {
        return Err(LaneError::Format(format!(
            "{count} records need {expected} bytes, file has {}",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(RECORD_FLOATS * 8)
        .map(|rec| {
            let f: Vec<f64> = rec
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Sample {
                state: LaneState::new(f[0], f[1]),
                env: EnvLatent {
                    brightness: f[2],
                    lane_width: f[3],
                    texture_phase: f[4],
                },
                image: f[5..].to_vec(),
            }
        })
        .collect())
}

/// Human-readable export with one row per sample.
pub fn write_dataset_csv(samples: &[Sample], path: &Path) -> Result<(), LaneError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let pixels: Vec<String> = (0..IMAGE_DIM).map(|i| format!("p{i}")).collect();
    writeln!(w, "d,theta,brightness,lane_width,texture_phase,{}", pixels.join(","))?;
    for s in samples {
        let vals: Vec<String> = [
            s.state.d,
            s.state.theta,
            s.env.brightness,
            s.env.lane_width,
            s.env.texture_phase,
        ]
        .iter()
        .chain(&s.image)
        .map(|v| v.to_string())
        .collect();
        writeln!(w, "{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
