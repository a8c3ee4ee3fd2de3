//! Seeded weight initialization and the `.cfw` weight file.
//!
//! A `.cfw` file is a pretty-printed JSON manifest, a blank line, then every
//! tensor as little-endian `f32` in manifest order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::scene::seeded;

pub const WEIGHT_FORMAT: &str = "cfw";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;
pub const TYPE_EMBEDDING_STD: f64 = 0.02;
const STREAM_WEIGHTS: u64 = 32;
const SEPARATOR: &[u8] = b"\n\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

impl WeightManifest {
    /// Bytes covered by the tensors.
    pub fn blob_len(&self) -> usize {
        self.tensors.iter().map(|t| t.length).sum()
    }

    /// Names are unique, dtypes are `f32`, lengths agree with shapes and the
    /// tensors tile the blob from offset zero without gaps.
    pub fn validate(&self) -> Result<()> {
        if self.format != WEIGHT_FORMAT || self.version != WEIGHT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight format {} v{}",
                self.format, self.version
            )));
        }
        let mut names = HashSet::new();
        let mut cursor = 0usize;
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
            if t.dtype != "f32" {
                return Err(Error::Format(format!("tensor {} has dtype {}", t.name, t.dtype)));
            }
            let elems: usize = t.shape.iter().product();
            if t.length != 4 * elems {
                return Err(Error::Format(format!(
                    "tensor {} is {} bytes for shape {:?}",
                    t.name, t.length, t.shape
                )));
            }
            if t.offset != cursor {
                return Err(Error::Format(format!(
                    "tensor {} starts at {} but the previous one ends at {cursor}",
                    t.name, t.offset
                )));
            }
            cursor += t.length;
        }
        Ok(())
    }
}

/// Hex SHA-256 over the config fields that determine tensor shapes.
pub fn config_hash(config: &DecoderConfig) -> String {
    let key = format!(
        "d={};heads={};classes={};k_base={};k_pv={}",
        config.d, config.heads, config.num_classes, config.qswap.k_base, config.k_pv
    );
    hex::encode(Sha256::digest(key.as_bytes()))
}

/// Seeded initialization. Linear weights are uniform in `±1/sqrt(fan_in)`,
/// biases and norm shifts zero, norm gains one, type embeddings
/// `N(0, 0.02)`, sampling ranges from the config. Values are drawn as `f32`
/// so both scalar widths hold the same numbers and save losslessly.
pub fn init_weights<T: Real>(seed: u64, config: &DecoderConfig) -> Result<DecoderWeights<T>> {
    config.validate()?;
    let mut weights = DecoderWeights::zeros(config);
    let mut rng = seeded(seed, STREAM_WEIGHTS);
    let normal = Normal::new(0.0f32, TYPE_EMBEDDING_STD as f32)
        .map_err(|e| Error::Config(format!("type embedding distribution: {e}")))?;
    weights.visit_mut(&mut |name, shape, data| {
        if name.ends_with(".weight") {
            let bound = 1.0 / (shape[1] as f32).sqrt();
            for v in data.iter_mut() {
                *v = T::of(rng.gen_range(-bound..=bound) as f64);
            }
        } else if name.starts_with("type_embedding.") {
            for v in data.iter_mut() {
                *v = T::of(normal.sample(&mut rng) as f64);
            }
        } else if name.ends_with(".range") {
            // Round the configured range to f32 as well.
            for v in data.iter_mut() {
                *v = T::of(v.to_f64_lossy() as f32 as f64);
            }
        }
    });
    Ok(weights)
}

/// Serializes to the in-memory `.cfw` byte layout.
pub fn encode_weights<T: Real>(weights: &DecoderWeights<T>, config: &DecoderConfig) -> Result<Vec<u8>> {
    weights.check(config)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut lossy = None;
    weights.visit(&mut |name, shape, data| {
        let offset = blob.len();
        for &v in data {
            let f = v.to_f64_lossy() as f32;
            if lossy.is_none() && f as f64 != v.to_f64_lossy() {
                lossy = Some(name.to_string());
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() - offset,
        });
    });
    if let Some(name) = lossy {
        return Err(Error::Format(format!("tensor {name} is not representable as f32")));
    }
    let manifest = WeightManifest {
        format: WEIGHT_FORMAT.into(),
        version: WEIGHT_FORMAT_VERSION,
        config_hash: config_hash(config),
        tensors,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.extend_from_slice(SEPARATOR);
    bytes.extend_from_slice(&blob);
    Ok(bytes)
}

/// Splits a `.cfw` byte buffer into its manifest and blob.
pub fn read_manifest(bytes: &[u8]) -> Result<(WeightManifest, &[u8])> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Format("missing manifest separator".into()))?;
    let manifest: WeightManifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    manifest.validate()?;
    let blob = &bytes[split + SEPARATOR.len()..];
    if blob.len() != manifest.blob_len() {
        return Err(Error::Format(format!(
            "blob is {} bytes, manifest describes {}",
            blob.len(),
            manifest.blob_len()
        )));
    }
    Ok((manifest, blob))
}

/// Parses `.cfw` bytes, rejecting anything whose tensors differ from what
/// `config` requires.
pub fn decode_weights<T: Real>(bytes: &[u8], config: &DecoderConfig) -> Result<DecoderWeights<T>> {
    config.validate()?;
    let (manifest, blob) = read_manifest(bytes)?;
    if manifest.config_hash != config_hash(config) {
        return Err(Error::Config("weight file was written for a different decoder config".into()));
    }
    let mut weights = DecoderWeights::<T>::zeros(config);
    let expected = weights.tensor_specs();
    let found: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != found {
        return Err(Error::Config("weight file tensors do not match decoder config".into()));
    }
    let mut entries = manifest.tensors.iter();
    weights.visit_mut(&mut |_, _, data| {
        let entry = entries.next().expect("tensor lists were compared");
        let bytes = &blob[entry.offset..entry.offset + entry.length];
        for (v, chunk) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            let f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *v = T::of(f as f64);
        }
    });
    weights.check(config)?;
    Ok(weights)
}

pub fn save_weights<T: Real>(weights: &DecoderWeights<T>, config: &DecoderConfig, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(weights, config)?)?;
    Ok(())
}

pub fn load_weights<T: Real>(path: &Path, config: &DecoderConfig) -> Result<DecoderWeights<T>> {
    decode_weights(&fs::read(path)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderConfig {
        DecoderConfig {
            d: 16,
            heads: 2,
            num_classes: 3,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn same_seed_same_tensors() {
        let a: DecoderWeights<f64> = init_weights(3, &small()).unwrap();
        let b: DecoderWeights<f64> = init_weights(3, &small()).unwrap();
        let c: DecoderWeights<f64> = init_weights(4, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_are_zero_and_gains_one() {
        let w: DecoderWeights<f64> = init_weights(1, &small()).unwrap();
        w.visit(&mut |name, _, data| {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(data.iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(data.iter().all(|&v| v == 1.0), "{name}");
            }
        });
    }

    #[test]
    fn f32_and_f64_init_agree() {
        let a: DecoderWeights<f64> = init_weights(9, &small()).unwrap();
        let b: DecoderWeights<f32> = init_weights(9, &small()).unwrap();
        let mut xs = Vec::new();
        a.visit(&mut |_, _, d| xs.extend_from_slice(d));
        let mut ys = Vec::new();
        b.visit(&mut |_, _, d| ys.extend(d.iter().map(|&v| v as f64)));
        assert_eq!(xs, ys);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let cfg = small();
        let w: DecoderWeights<f64> = init_weights(5, &cfg).unwrap();
        let bytes = encode_weights(&w, &cfg).unwrap();
        let back: DecoderWeights<f64> = decode_weights(&bytes, &cfg).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let cfg = small();
        let w: DecoderWeights<f32> = init_weights(5, &cfg).unwrap();
        let bytes = encode_weights(&w, &cfg).unwrap();
        let err = decode_weights::<f32>(&bytes[..bytes.len() - 3], &cfg).unwrap_err();
        assert_eq!(err.kind(), "format");
    }

    #[test]
    fn other_config_is_rejected() {
        let cfg = small();
        let w: DecoderWeights<f32> = init_weights(5, &cfg).unwrap();
        let bytes = encode_weights(&w, &cfg).unwrap();
        let other = DecoderConfig { num_classes: 4, ..cfg };
        assert!(decode_weights::<f32>(&bytes, &other).is_err());
    }

    #[test]
    fn non_f32_values_refuse_to_save() {
        let cfg = small();
        let mut w: DecoderWeights<f64> = DecoderWeights::zeros(&cfg);
        w.head.class.bias[0] = 0.1;
        assert_eq!(encode_weights(&w, &cfg).unwrap_err().kind(), "format");
    }
}
