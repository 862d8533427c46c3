//! Binary checkpoint format.
//!
//! Layout, in order:
//!
//! ```text
//! magic "ARSCKPT1" | meta_len: u64 LE | meta JSON | tensor payload | sha256
//! ```
//!
//! The metadata block carries the format version, the training config
//! echo, step counters, the RNG bookkeeping, and the tensor manifest
//! (name + shape, in payload order). Tensors are little-endian IEEE-754
//! binary64, row-major. The trailing SHA-256 digest covers every byte
//! before it, so any corruption is rejected on load. Saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ars::ArsParams;
use crate::encoder::ToyEncoderParams;
use crate::losses::Temperature;
use crate::model::ModelParams;
use crate::optimizer::AdamWState;
use crate::trainer::{BackendChoice, TrainConfig};

pub const MAGIC: &[u8; 8] = b"ARSCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {msg}")]
    Format { msg: String },
    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("unsupported checkpoint version {got} (this build reads {expected})")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
}

/// What it takes to reproduce the random streams: every stream is derived
/// from the master seed plus the epoch/step counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub epochs_completed: u64,
    pub steps_completed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: TrainConfig,
    step: u64,
    epochs_completed: u64,
    rng: RngState,
    tensors: Vec<TensorMeta>,
}

/// Serialized model state plus training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epochs_completed: u64,
    pub rng: RngState,
    pub params: ModelParams,
    pub opt_state: AdamWState,
}

fn moment_names(param: &str) -> (String, String) {
    (format!("opt.m.{param}"), format!("opt.v.{param}"))
}

impl Checkpoint {
    /// Tensor manifest in payload order: parameters first, then the
    /// optimizer moments of each parameter.
    fn tensor_manifest(&self) -> Vec<TensorMeta> {
        let mut out = Vec::new();
        for spec in self.params.manifest() {
            out.push(TensorMeta { name: spec.name.to_string(), shape: spec.shape.clone() });
        }
        for spec in self.params.manifest() {
            let (m, v) = moment_names(spec.name);
            out.push(TensorMeta { name: m, shape: spec.shape.clone() });
            out.push(TensorMeta { name: v, shape: spec.shape });
        }
        out
    }

    fn tensor_data(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(values) = self.params.tensor(name) {
            return Some(values.to_vec());
        }
        for spec in self.params.manifest() {
            let (m_name, v_name) = moment_names(spec.name);
            if name == m_name || name == v_name {
                let stored = self
                    .opt_state
                    .moments()
                    .find(|(n, _, _)| *n == spec.name)
                    .map(|(_, m, v)| if name == m_name { m.to_vec() } else { v.to_vec() });
                // Tensors the optimizer has not touched yet persist as zeros.
                return Some(stored.unwrap_or_else(|| vec![0.0; spec.len()]));
            }
        }
        None
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let display = path.display().to_string();
        let io_err = |source| CheckpointError::Io { path: display.clone(), source };

        let meta = CheckpointMeta {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            epochs_completed: self.epochs_completed,
            rng: self.rng,
            tensors: self.tensor_manifest(),
        };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;

        let file = File::create(path).map_err(io_err)?;
        let mut out = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };
        out.write_all(MAGIC).map_err(io_err)?;
        out.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io_err)?;
        out.write_all(&meta_json).map_err(io_err)?;
        for tensor in &meta.tensors {
            let data = self
                .tensor_data(&tensor.name)
                .ok_or_else(|| CheckpointError::Format { msg: format!("unknown tensor {}", tensor.name) })?;
            for value in data {
                out.write_all(&value.to_le_bytes()).map_err(io_err)?;
            }
        }
        let digest = out.hasher.finalize();
        let mut inner = out.inner;
        inner.write_all(&digest).map_err(io_err)?;
        inner.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let display = path.display().to_string();
        let bytes = std::fs::read(path)
            .map_err(|source| CheckpointError::Io { path: display, source })?;
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(CheckpointError::Format { msg: "file too short".into() });
        }

        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(CheckpointError::ChecksumMismatch);
        }

        if &body[..8] != MAGIC {
            if &body[..7] == b"ARSCKPT" {
                let got = (body[7] as char).to_digit(10).unwrap_or(0);
                return Err(CheckpointError::VersionMismatch {
                    expected: FORMAT_VERSION,
                    got,
                });
            }
            return Err(CheckpointError::Format { msg: "bad magic".into() });
        }

        let meta_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| CheckpointError::Format { msg: "metadata overruns file".into() })?;
        let meta: CheckpointMeta = serde_json::from_slice(&body[16..meta_end])
            .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;
        if meta.version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                expected: FORMAT_VERSION,
                got: meta.version,
            });
        }

        let config = meta.config.clone();
        let (h, d) = (config.latent_dim, config.embedding_dim);
        let mut params = ModelParams {
            ars: ArsParams {
                w_q: vec![0.0; h * d],
                w_c: vec![0.0; h * d],
                w_att: vec![0.0; h],
                latent_dim: h,
                input_dim: d,
            },
            temperature: Temperature { log_tau: 0.0 },
            encoder: match config.backend {
                BackendChoice::Toy => Some(ToyEncoderParams {
                    table: vec![0.0; config.vocab_buckets * d],
                    buckets: config.vocab_buckets,
                    dim: d,
                }),
                BackendChoice::Precomputed => None,
            },
        };
        let expected: std::collections::BTreeMap<String, Vec<usize>> = {
            let mut map = std::collections::BTreeMap::new();
            for spec in params.manifest() {
                map.insert(spec.name.to_string(), spec.shape.clone());
                let (m, v) = moment_names(spec.name);
                map.insert(m, spec.shape.clone());
                map.insert(v, spec.shape);
            }
            map
        };

        let mut opt_state = AdamWState::new(config.adamw);
        opt_state.step = meta.step;
        type PendingMoments = std::collections::BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)>;
        let mut pending_moments = PendingMoments::default();

        let mut offset = meta_end;
        for tensor in &meta.tensors {
            let want_shape = expected.get(&tensor.name).ok_or_else(|| CheckpointError::Format {
                msg: format!("unexpected tensor {}", tensor.name),
            })?;
            if want_shape != &tensor.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: tensor.name.clone(),
                    expected: want_shape.clone(),
                    got: tensor.shape.clone(),
                });
            }
            let len: usize = tensor.shape.iter().product();
            let end = offset + len * 8;
            if end > body.len() {
                return Err(CheckpointError::Format {
                    msg: format!("payload truncated at tensor {}", tensor.name),
                });
            }
            let values: Vec<f64> = body[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;

            if let Some(slot) = params.tensor_mut(&tensor.name) {
                slot.copy_from_slice(&values);
            } else if let Some(param) = tensor.name.strip_prefix("opt.m.") {
                pending_moments.entry(param.to_string()).or_default().0 = Some(values);
            } else if let Some(param) = tensor.name.strip_prefix("opt.v.") {
                pending_moments.entry(param.to_string()).or_default().1 = Some(values);
            }
        }
        if offset != body.len() {
            return Err(CheckpointError::Format { msg: "trailing bytes after payload".into() });
        }
        for (name, (m, v)) in pending_moments {
            match (m, v) {
                (Some(m), Some(v)) => opt_state.restore_moments(&name, m, v),
                _ => {
                    return Err(CheckpointError::Format {
                        msg: format!("incomplete optimizer moments for {name}"),
                    });
                }
            }
        }

        Ok(Self {
            config,
            step: meta.step,
            epochs_completed: meta.epochs_completed,
            rng: meta.rng,
            params,
            opt_state,
        })
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    fn small_checkpoint() -> Checkpoint {
        let config = TrainConfig {
            latent_dim: 3,
            embedding_dim: 2,
            vocab_buckets: 8,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(3, 2, Some(8), 0.07, 42);
        Checkpoint {
            config,
            step: 17,
            epochs_completed: 2,
            rng: RngState { master_seed: 42, epochs_completed: 2, steps_completed: 17 },
            params,
            opt_state: AdamWState::new(Default::default()),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ckpt = small_checkpoint();
        ckpt.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.rng, ckpt.rng);
        assert_eq!(loaded.params.ars, ckpt.params.ars);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corruption_is_rejected_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        small_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::ChecksumMismatch)));
    }

    #[test]
    fn wrong_version_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        small_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = b'2';
        // Recompute the trailer so the version check is what fires.
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::VersionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        small_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn moments_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = small_checkpoint();
        ckpt.opt_state.restore_moments("ars.w_att", vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (_, m, v) = loaded.opt_state.moments().find(|(n, _, _)| *n == "ars.w_att").unwrap();
        assert_eq!(m, &[0.1, 0.2, 0.3]);
        assert_eq!(v, &[0.4, 0.5, 0.6]);
    }
}
