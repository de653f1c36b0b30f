//! Single-file checkpoint container and run-directory locking.
//!
//! Layout: magic `SMOE`, version u32, manifest length u64, manifest as UTF-8
//! JSON, tensor payloads as little-endian f64, then a SHA-256 digest of every
//! preceding byte.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{AdamW, TrainState};
use crate::error::{Error, Result};
use crate::model::{ArchKind, Model, ModelConfig, ParamRegistry, PrunableAxis};
use crate::pruning::{PruneDecision, SensitivityReport};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMOE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    pub length: u64,
    /// Present for model parameters, absent for optimizer moments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<PrunableAxis>,
}

/// Optimizer scalars; the moment tensors live in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub history: Vec<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<SensitivityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<PruneDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
    /// Hex SHA-256 of the payload section.
    pub payload_sha256: String,
}

/// A model plus the optional artifacts stored beside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub report: Option<SensitivityReport>,
    pub decision: Option<PruneDecision>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, report: None, decision: None, train_state: None }
    }
}

const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_tensor(payload: &mut Vec<u8>, dir: &mut Vec<TensorEntry>, name: String, t: &Tensor, axis: Option<PrunableAxis>) {
    let offset = payload.len() as u64;
    for &x in t.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    dir.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: "f64".into(), offset, length: 8 * t.numel() as u64, axis });
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<(Vec<u8>, CheckpointManifest)> {
    ckpt.model.check_consistency()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, e) in ckpt.model.params().iter() {
        push_tensor(&mut payload, &mut tensors, name.clone(), &e.tensor, Some(e.axis));
    }
    let optimizer = ckpt.train_state.as_ref().map(|s| {
        for (name, m) in &s.opt.m {
            push_tensor(&mut payload, &mut tensors, format!("{M_PREFIX}{name}"), m, None);
        }
        for (name, v) in &s.opt.v {
            push_tensor(&mut payload, &mut tensors, format!("{V_PREFIX}{name}"), v, None);
        }
        OptimizerMeta {
            step: s.step,
            beta1: s.opt.beta1,
            beta2: s.opt.beta2,
            eps: s.opt.eps,
            weight_decay: s.opt.weight_decay,
            t: s.opt.t,
            history: s.history.clone(),
            rng: s.rng.clone(),
        }
    });
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.model.config().clone(),
        tensors,
        report: ckpt.report.clone(),
        decision: ckpt.decision.clone(),
        optimizer,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok((out, manifest))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Checkpoint, CheckpointManifest)> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = PREFIX_LEN.checked_add(json_len).filter(|&e| e <= body.len()).ok_or_else(|| Error::Format("manifest length".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&body[PREFIX_LEN..json_end])?;
    let payload = &body[json_end..];
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checksum);
    }

    let mut next = 0u64;
    let mut params = ParamRegistry::new();
    let (mut m, mut v) = (Default::default(), Default::default());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f64" || e.offset != next || e.length != 8 * numel as u64 {
            return Err(Error::Format(format!("tensor {} directory entry disagrees with payload", e.name)));
        }
        let end = (e.offset + e.length) as usize;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} runs past the payload", e.name)));
        }
        next += e.length;
        let data = payload[e.offset as usize..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if let Some(name) = e.name.strip_prefix(M_PREFIX) {
            insert_moment(&mut m, name, t)?;
        } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
            insert_moment(&mut v, name, t)?;
        } else {
            let axis = e.axis.ok_or_else(|| Error::Format(format!("parameter {} has no axis tag", e.name)))?;
            params.register(e.name.clone(), t, axis)?;
        }
    }
    if next as usize != payload.len() {
        return Err(Error::Format("trailing payload bytes".into()));
    }
    let model = Model::from_parts(manifest.config.clone(), params)?;
    let train_state = manifest.optimizer.as_ref().map(|o| TrainState {
        step: o.step,
        opt: AdamW { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay, t: o.t, m: m.clone(), v: v.clone() },
        history: o.history.clone(),
        rng: o.rng.clone(),
    });
    let ckpt = Checkpoint { model, report: manifest.report.clone(), decision: manifest.decision.clone(), train_state };
    Ok((ckpt, manifest))
}

fn insert_moment(map: &mut std::collections::BTreeMap<String, Tensor>, name: &str, t: Tensor) -> Result<()> {
    if map.insert(name.to_string(), t).is_some() {
        return Err(Error::Format(format!("duplicate moment {name}")));
    }
    Ok(())
}

/// Write atomically through a temporary sibling file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<CheckpointManifest> {
    let (bytes, manifest) = checkpoint_to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(checkpoint_from_bytes(&fs::read(path)?)?.0)
}

/// Load and require a given architecture.
pub fn load_model_as(path: &Path, arch: ArchKind) -> Result<Model> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.config().arch_kind;
    if found != arch {
        return Err(Error::WrongArch { expected: arch.to_string(), found: found.to_string() });
    }
    Ok(ckpt.model)
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

pub const LOCK_FILE: &str = ".lock";

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(path.display().to_string())),
            Err(e) => return Err(e.into()),
        };
        writeln!(file, "{}", std::process::id())?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
