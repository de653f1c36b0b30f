use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Moe,
    DenseFfn,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchKind::Moe => f.write_str("moe"),
            ArchKind::DenseFfn => f.write_str("dense_ffn"),
        }
    }
}

/// Architecture hyperparameters of a (possibly pruned) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_head_q: usize,
    pub n_head_kv: usize,
    pub d_head: usize,
    pub d_expert: usize,
    pub n_layer: usize,
    pub n_expert: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub arch_kind: ArchKind,
    /// Intermediate width of the dense FFN; unused for MoE models.
    #[serde(default)]
    pub d_ffn: usize,
}

impl ModelConfig {
    /// Small MoE used by the gradient and pruning checks.
    pub fn tiny_moe() -> Self {
        Self {
            d_model: 16,
            n_head_q: 4,
            n_head_kv: 2,
            d_head: 4,
            d_expert: 16,
            n_layer: 2,
            n_expert: 4,
            top_k: 2,
            vocab_size: 32,
            max_seq_len: 64,
            arch_kind: ArchKind::Moe,
            d_ffn: 0,
        }
    }

    /// Desk-scale teacher: 64-wide, 4 layers, 8 experts of width 128, top-2.
    pub fn desk_teacher(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            d_model: 64,
            n_head_q: 8,
            n_head_kv: 2,
            d_head: 8,
            d_expert: 128,
            n_layer: 4,
            n_expert: 8,
            top_k: 2,
            vocab_size,
            max_seq_len,
            arch_kind: ArchKind::Moe,
            d_ffn: 0,
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_head_q / self.n_head_kv
    }

    pub fn is_moe(&self) -> bool {
        self.arch_kind == ArchKind::Moe
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_head_q", self.n_head_q),
            ("n_head_kv", self.n_head_kv),
            ("d_head", self.d_head),
            ("n_layer", self.n_layer),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.n_head_q.is_multiple_of(self.n_head_kv) {
            return Err(Error::InvalidConfig(format!(
                "n_head_q {} not divisible by n_head_kv {}",
                self.n_head_q, self.n_head_kv
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_head must be even for rotary encoding".into()));
        }
        match self.arch_kind {
            ArchKind::Moe => {
                if self.d_expert == 0 || self.n_expert == 0 {
                    return Err(Error::InvalidConfig("d_expert and n_expert must be >= 1".into()));
                }
                if self.top_k == 0 || self.top_k > self.n_expert {
                    return Err(Error::InvalidConfig(format!(
                        "top_k {} must lie in 1..={}",
                        self.top_k, self.n_expert
                    )));
                }
            }
            ArchKind::DenseFfn => {
                if self.d_ffn == 0 {
                    return Err(Error::InvalidConfig("d_ffn must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    fn attention_params(&self) -> usize {
        let q = self.n_head_q * self.d_head;
        let kv = self.n_head_kv * self.d_head;
        self.d_model * q + 2 * self.d_model * kv + q * self.d_model
    }

    fn ffn_unit_params(&self) -> usize {
        match self.arch_kind {
            ArchKind::Moe => 3 * self.d_model * self.d_expert,
            ArchKind::DenseFfn => 3 * self.d_model * self.d_ffn,
        }
    }

    fn router_params(&self) -> usize {
        if self.is_moe() {
            self.d_model * self.n_expert
        } else {
            0
        }
    }

    fn embedding_params(&self) -> usize {
        2 * self.vocab_size * self.d_model
    }

    /// Closed-form count of every stored parameter, norms included.
    pub fn param_count(&self) -> usize {
        let units = if self.is_moe() { self.n_expert } else { 1 };
        let per_layer = 2 * self.d_model + self.attention_params() + self.router_params() + units * self.ffn_unit_params();
        self.embedding_params() + self.d_model + self.n_layer * per_layer
    }

    /// Parameters touched per token: embeddings, attention, router and the
    /// `top_k` selected experts. Norm gains are excluded.
    pub fn active_param_count(&self) -> usize {
        let units = if self.is_moe() { self.top_k } else { 1 };
        let per_layer = self.attention_params() + self.router_params() + units * self.ffn_unit_params();
        self.embedding_params() + self.n_layer * per_layer
    }
}
