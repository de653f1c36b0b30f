//! Precomputed teacher top-k probabilities and their binary file format.
//!
//! Layout (little-endian): magic `SMTC`, version u32, k u32, vocab u32,
//! fingerprint u64, token count u64, then per token a u64 position followed
//! by `k` pairs of (u32 index, f32 probability).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::KdTargets;
use crate::error::{Error, Result};
use crate::eval::{flatten_batch, EVAL_BATCH};
use crate::model::Model;
use crate::tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"SMTC";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

/// Stable 64-bit identity of a model's configuration and weights.
pub fn teacher_fingerprint(model: &Model) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).expect("config serializes"));
    for (name, entry) in model.params().iter() {
        h.update(name.as_bytes());
        for &x in entry.tensor.data() {
            h.update(x.to_le_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub k: usize,
    pub vocab_size: usize,
    pub fingerprint: u64,
    /// Flat token positions: sequence `i`, offset `t` is `i * seq_len + t`.
    pub positions: Vec<u64>,
    pub indices: Vec<u32>,
    pub probs: Vec<f32>,
}

impl TeacherCache {
    /// Top-k teacher probabilities for every input position of `seqs`.
    pub fn build(teacher: &Model, seqs: &[Vec<u32>], seq_len: usize, k: usize) -> Result<Self> {
        let vocab = teacher.config().vocab_size;
        if k == 0 || k > vocab {
            return Err(Error::InvalidConfig(format!("cache k {k} must lie in 1..={vocab}")));
        }
        let mut cache = Self {
            k,
            vocab_size: vocab,
            fingerprint: teacher_fingerprint(teacher),
            positions: Vec::with_capacity(seqs.len() * seq_len),
            indices: Vec::with_capacity(seqs.len() * seq_len * k),
            probs: Vec::with_capacity(seqs.len() * seq_len * k),
        };
        let mut pos = 0u64;
        for chunk in seqs.chunks(EVAL_BATCH) {
            let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
            let (inputs, _) = flatten_batch(&refs, seq_len);
            let logits = teacher.logits(&inputs, seq_len, None)?;
            let probs = tensor::softmax(&logits);
            for t in 0..probs.rows() {
                let row = probs.row(t);
                cache.positions.push(pos);
                pos += 1;
                for i in tensor::topk_indices(row, k) {
                    cache.indices.push(i as u32);
                    cache.probs.push(row[i] as f32);
                }
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn entry(&self, pos: usize) -> Result<(&[u32], &[f32])> {
        if pos >= self.len() {
            return Err(Error::IndexOutOfRange { what: "cache position", index: pos, limit: self.len() });
        }
        Ok((&self.indices[pos * self.k..][..self.k], &self.probs[pos * self.k..][..self.k]))
    }

    /// Targets for the input positions of sequences `ids`.
    pub fn targets(&self, ids: &[usize], seq_len: usize) -> Result<KdTargets> {
        let mut indices = Vec::with_capacity(ids.len() * seq_len * self.k);
        let mut probs = Vec::with_capacity(ids.len() * seq_len * self.k);
        for &i in ids {
            for t in 0..seq_len {
                let (idx, p) = self.entry(i * seq_len + t)?;
                indices.extend(idx.iter().map(|&j| j as usize));
                probs.extend(p.iter().map(|&q| q as f64));
            }
        }
        Ok(KdTargets { k: self.k, indices, probs })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 8 * self.k));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (r, &pos) in self.positions.iter().enumerate() {
            out.extend_from_slice(&pos.to_le_bytes());
            for j in 0..self.k {
                out.extend_from_slice(&self.indices[r * self.k + j].to_le_bytes());
                out.extend_from_slice(&self.probs[r * self.k + j].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("not a teacher cache".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(Error::Version { found: version, expected: CACHE_VERSION });
        }
        let k = u32_at(8) as usize;
        let vocab_size = u32_at(12) as usize;
        let fingerprint = u64_at(16);
        let n = u64_at(24) as usize;
        let rec = 8 + 8 * k;
        if k == 0 || bytes.len() != HEADER_LEN + n * rec {
            return Err(Error::Format(format!("cache length {} does not match header", bytes.len())));
        }
        let mut cache = Self {
            k,
            vocab_size,
            fingerprint,
            positions: Vec::with_capacity(n),
            indices: Vec::with_capacity(n * k),
            probs: Vec::with_capacity(n * k),
        };
        for r in 0..n {
            let o = HEADER_LEN + r * rec;
            let pos = u64_at(o);
            if pos != r as u64 {
                return Err(Error::Format(format!("record {r} has position {pos}")));
            }
            cache.positions.push(pos);
            for j in 0..k {
                let p = o + 8 + 8 * j;
                let idx = u32_at(p);
                if idx as usize >= vocab_size {
                    return Err(Error::IndexOutOfRange { what: "cached index", index: idx as usize, limit: vocab_size });
                }
                cache.indices.push(idx);
                cache.probs.push(f32::from_le_bytes(bytes[p + 4..p + 8].try_into().expect("4 bytes")));
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
