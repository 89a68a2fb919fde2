//! Single-file checkpoints.
//!
//! Layout: the magic `MMCK`, a little-endian `u64` header length, a JSON
//! header, then every tensor as raw little-endian `f64` in header order.
//! The header records the format version, model configuration and its
//! SHA-256, an opaque training-configuration snapshot, the step counter,
//! and a table of `(name, role, shape, dtype, offset)` entries.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MMChange, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::training::optim::{AdamState, Moments};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: [usize; 4],
    dtype: String,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    train_config: serde_json::Value,
    step: u64,
    optimizer_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub step: u64,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Configuration the caller expects; a different hash is rejected.
    pub expected: Option<ModelConfig>,
    /// Accept a configuration-hash mismatch anyway.
    pub allow_config_mismatch: bool,
}

/// Hex SHA-256 of the canonical JSON form of `cfg`.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    hex::encode(Sha256::digest(&json))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: &str, role: Role, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: t.shape().dims(),
                dtype: "f64".into(),
                offset: data.len() as u64,
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (i, e) in self.params.entries().iter().enumerate() {
            let role = match e.kind {
                ParamKind::Trainable => Role::Param,
                ParamKind::Buffer => Role::Buffer,
            };
            push(&e.name, role, &e.value, &mut tensors);
            if let Some(Some(mo)) = self.optimizer.as_ref().map(|o| o.moments.get(i).cloned().flatten()) {
                push(&e.name, Role::AdamM, &mo.m, &mut tensors);
                push(&e.name, Role::AdamV, &mo.v, &mut tensors);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            train_config: self.train_config.clone(),
            step: self.step,
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut bytes = Vec::with_capacity(12 + header.len() + data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);

        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, opts: &LoadOptions) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, opts)
    }

    pub fn from_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &body[hlen..];
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let stored = config_hash(&header.config);
        if stored != header.config_hash && !opts.allow_config_mismatch {
            return Err(bad("config hash does not match the stored configuration"));
        }
        if let Some(expected) = &opts.expected {
            let want = config_hash(expected);
            if want != header.config_hash && !opts.allow_config_mismatch {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {} vs expected {}",
                    short(&header.config_hash),
                    short(&want)
                )));
            }
        }

        let (_, mut params) = MMChange::new(header.config.clone(), 0)?;
        let mut moments: Vec<Option<Moments>> = vec![None; params.len()];
        let mut seen = vec![false; params.len()];
        let mut pending_m: Vec<Option<Tensor>> = vec![None; params.len()];
        for t in &header.tensors {
            if t.dtype != "f64" {
                return Err(Error::Checkpoint(format!("`{}`: unsupported dtype {}", t.name, t.dtype)));
            }
            let id = params
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
            let shape = Shape::new(t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
            if shape != params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: shape {shape} does not match model {}",
                    t.name,
                    params.get(id).shape()
                )));
            }
            let start = t.offset as usize;
            let end = start + shape.numel() * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("`{}`: data out of range", t.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::from_vec(shape, values)?;
            let i = id.index();
            match t.role {
                Role::Param | Role::Buffer => {
                    let kind = params.entry(id).kind;
                    let expect = if t.role == Role::Param { ParamKind::Trainable } else { ParamKind::Buffer };
                    if kind != expect {
                        return Err(Error::Checkpoint(format!("`{}`: wrong role", t.name)));
                    }
                    *params.get_mut(id) = value;
                    seen[i] = true;
                }
                Role::AdamM => pending_m[i] = Some(value),
                Role::AdamV => {
                    let m = pending_m[i]
                        .take()
                        .ok_or_else(|| Error::Checkpoint(format!("`{}`: second moment without first", t.name)))?;
                    moments[i] = Some(Moments { m, v: value });
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing tensor `{}`",
                params.entries()[i].name
            )));
        }
        let optimizer = header.optimizer_t.map(|t| AdamState { t, moments });
        Ok(Self {
            config: header.config,
            train_config: header.train_config,
            params,
            optimizer,
            step: header.step,
        })
    }

    /// The network described by the stored configuration.
    pub fn model(&self) -> Result<MMChange> {
        Ok(MMChange::new(self.config.clone(), 0)?.0)
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
