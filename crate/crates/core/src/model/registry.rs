//! Named parameter storage with prunable-axis tags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which structural unit a tensor's prunable axis belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrunableAxis {
    ExpertNeuron { layer: usize, expert: usize },
    GqaGroup { layer: usize },
    FfnNeuron { layer: usize },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub axis: PrunableAxis,
}

/// Every trainable tensor of a model, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new tensor; a name may only be registered once.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, axis: PrunableAxis) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name, ParamEntry { tensor, axis });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Replace a tensor in place, keeping its axis tag.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        *self.get_mut(name)? = tensor;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Result<ParamEntry> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Result<()> {
        let entry = self.remove(from)?;
        self.entries.insert(to.to_string(), entry);
        Ok(())
    }

    pub fn set_axis(&mut self, name: &str, axis: PrunableAxis) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.axis = axis)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }
}

/// Canonical parameter names.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const UNEMBED: &str = "unembed";
    pub const FINAL_NORM: &str = "final_norm";

    pub fn attn_norm(l: usize) -> String {
        format!("layers.{l}.attn_norm")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("layers.{l}.ffn_norm")
    }
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn wo(l: usize) -> String {
        format!("layers.{l}.attn.wo")
    }
    pub fn router(l: usize) -> String {
        format!("layers.{l}.router")
    }
    /// `which` is 1 (gate), 2 (up) or 3 (down).
    pub fn expert(l: usize, e: usize, which: u8) -> String {
        format!("layers.{l}.experts.{e}.w{which}")
    }
    pub fn ffn(l: usize, which: u8) -> String {
        format!("layers.{l}.ffn.w{which}")
    }
}
