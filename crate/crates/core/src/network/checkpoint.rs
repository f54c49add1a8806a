//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"SONZCKPT"`, `u32` format version, `u64` header length, JSON header,
//! every tensor as raw `f32` in [`ModelParams::visit`] order, and a SHA-256
//! of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::postprocess::PostConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SONZCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub model: ModelConfig,
    pub dsp: DspConfig,
    pub post: PostConfig,
    pub seed: u64,
    /// Epoch (1-based) the parameters were taken from; 0 for an untrained model.
    pub epoch: usize,
    pub best_val_hr3f: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    dsp: DspConfig,
    post: PostConfig,
    seed: u64,
    epoch: usize,
    best_val_hr3f: f64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        self.params.visit(|name, shape, _| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            })
        });
        let header = Header {
            model: self.model.clone(),
            dsp: self.dsp.clone(),
            post: self.post.clone(),
            seed: self.seed,
            epoch: self.epoch,
            best_val_hr3f: self.best_val_hr3f,
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 4 * self.params.count() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        self.params.visit(|_, _, t| {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file is corrupted or truncated)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.model.validate()?;

        let mut params = ModelParams::<f32>::zeros(&header.model);
        let mut expected = Vec::new();
        params.visit(|name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        let stored: Vec<_> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if stored != expected {
            return Err(Error::ConfigMismatch(
                "stored tensor names/shapes do not match the stored model config".into(),
            ));
        }
        let mut payload = &body[header_end..];
        if payload.len() != 4 * params.count() {
            return Err(bad("tensor payload has the wrong length"));
        }
        for t in params.tensors_mut() {
            let (chunk, rest) = payload.split_at(4 * t.len());
            for (v, b) in t.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
            payload = rest;
        }
        params.check_finite().map_err(|e| Error::Checkpoint(format!("non-finite parameters: {e}")))?;
        Ok(Checkpoint {
            params,
            model: header.model,
            dsp: header.dsp,
            post: header.post,
            seed: header.seed,
            epoch: header.epoch,
            best_val_hr3f: header.best_val_hr3f,
        })
    }

    /// Errors unless the stored model and front end equal the requested ones.
    pub fn check_compatible(&self, model: &ModelConfig, dsp: &DspConfig) -> Result<()> {
        if &self.model != model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model {:?} differs from configured model {:?}",
                self.model, model
            )));
        }
        if self.dsp.sr != dsp.sr || self.dsp.hop != dsp.hop || self.dsp.n_mels != dsp.n_mels || self.dsp.n_fft != dsp.n_fft {
            return Err(Error::ConfigMismatch(
                "checkpoint was trained with a different spectrogram front end".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
