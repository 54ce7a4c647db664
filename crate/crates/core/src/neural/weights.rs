//! `SPVN` weight files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SPVN" | version u32 | layer count u32 |
//!   per layer: activation u8 | in u32 | out u32 | weights f64[out*in] | biases f64[out]
//! ```
//!
//! Each weight file has a plain-text sidecar `<file>.meta` with `key=value`
//! lines for the model role, training-config hash and creation seed.

use std::path::{Path, PathBuf};

use super::mlp::{Activation, Layer, MlpNetwork};
use super::tensor::Tensor;
use super::NeuralError;

pub const WEIGHT_MAGIC: &[u8; 4] = b"SPVN";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

pub fn encode_weights(net: &MlpNetwork) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.param_count() * 8 + net.layers().len() * 9);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        out.push(l.activation.code());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        for w in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NeuralError> {
        if self.buf.len() - self.pos < n {
            return Err(NeuralError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, NeuralError> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<MlpNetwork, NeuralError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(NeuralError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(NeuralError::VersionMismatch {
            found: version,
            expected: WEIGHT_FORMAT_VERSION,
        });
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let code = r.take(1, "activation")?[0];
        let act = Activation::from_code(code)
            .ok_or_else(|| NeuralError::Malformed(format!("layer {i}: activation code {code}")))?;
        let in_dim = r.u32("input width")? as usize;
        let out_dim = r.u32("output width")? as usize;
        let w = r.f64s(in_dim * out_dim, "weights")?;
        let b = r.f64s(out_dim, "biases")?;
        layers.push(Layer::new(Tensor::matrix(out_dim, in_dim, w)?, b, act)?);
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    MlpNetwork::new(layers).map_err(|e| NeuralError::Malformed(e.to_string()))
}

pub fn save_weights(net: &MlpNetwork, path: &Path) -> Result<(), NeuralError> {
    std::fs::write(path, encode_weights(net))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<MlpNetwork, NeuralError> {
    decode_weights(&std::fs::read(path)?)
}

/// Sidecar record written next to each weight file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMetadata {
    pub role: String,
    pub config_hash: String,
    pub seed: u64,
}

fn meta_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_metadata(weights: &Path, meta: &ModelMetadata) -> Result<PathBuf, NeuralError> {
    let p = meta_path(weights);
    std::fs::write(
        &p,
        format!(
            "role={}\nconfig_hash={}\nseed={}\n",
            meta.role, meta.config_hash, meta.seed
        ),
    )?;
    Ok(p)
}

pub fn read_metadata(weights: &Path) -> Result<ModelMetadata, NeuralError> {
    let text = std::fs::read_to_string(meta_path(weights))?;
    let mut role = None;
    let mut hash = None;
    let mut seed = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NeuralError::Malformed(format!("metadata line {line:?}")))?;
        match k.trim() {
            "role" => role = Some(v.trim().to_string()),
            "config_hash" => hash = Some(v.trim().to_string()),
            "seed" => {
                seed = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| NeuralError::Malformed(format!("seed {v:?}")))?,
                )
            }
            other => return Err(NeuralError::Malformed(format!("unknown metadata key {other}"))),
        }
    }
    match (role, hash, seed) {
        (Some(role), Some(config_hash), Some(seed)) => Ok(ModelMetadata {
            role,
            config_hash,
            seed,
        }),
        _ => Err(NeuralError::Malformed("metadata is missing a field".into())),
    }
}
