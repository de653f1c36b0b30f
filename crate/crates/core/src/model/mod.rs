//! Mixture-of-experts transformer with a dense-FFN variant.
//!
//! Block layout: token embedding, then per layer a pre-norm grouped-query
//! attention sublayer and a pre-norm MoE (or dense GLU) sublayer, both
//! residual, then a final RMS norm and an untied unembedding.

mod config;
mod registry;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{ArchKind, ModelConfig};
pub use registry::{names, ParamEntry, ParamRegistry, PrunableAxis};

use crate::error::{Error, Result};
use crate::tape::{AttnGeom, Tape, Var};
use crate::tensor::{self, Tensor};

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;

/// Per-layer routing counters gathered during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub top_k: usize,
    pub tokens: usize,
    /// Top-k selections per expert.
    pub counts: Vec<u64>,
    /// Summed gate weight per expert.
    pub gate_mass: Vec<f64>,
    /// Summed full-softmax router probability per expert.
    pub prob_sum: Vec<f64>,
    /// Experts eligible for routing (all, unless masked out).
    pub active: Vec<bool>,
}

impl RoutingStats {
    pub fn new(n_expert: usize, top_k: usize) -> Self {
        Self {
            top_k,
            tokens: 0,
            counts: vec![0; n_expert],
            gate_mass: vec![0.0; n_expert],
            prob_sum: vec![0.0; n_expert],
            active: vec![true; n_expert],
        }
    }

    pub fn n_expert(&self) -> usize {
        self.counts.len()
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Fraction of all top-k selections that went to each expert.
    pub fn selection_fraction(&self) -> Vec<f64> {
        let total = (self.tokens * self.top_k) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    pub fn mean_prob(&self) -> Vec<f64> {
        self.prob_sum.iter().map(|p| p / self.tokens as f64).collect()
    }

    pub fn mean_gate_mass(&self) -> Vec<f64> {
        self.gate_mass.iter().map(|g| g / self.tokens as f64).collect()
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        self.tokens += other.tokens;
        for e in 0..self.counts.len() {
            self.counts[e] += other.counts[e];
            self.gate_mass[e] += other.gate_mass[e];
            self.prob_sum[e] += other.prob_sum[e];
        }
    }
}

/// Switch-style balance value `n_active * sum_e f_e * P_e`; equals 1 under
/// perfectly uniform routing.
pub fn aux_load_balance(stats: &RoutingStats) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::Empty("routing stats cover no tokens".into()));
    }
    let f = stats.selection_fraction();
    let p = stats.mean_prob();
    Ok(stats.n_active() as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Forward-time zero masks that simulate pruning without structural edits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardMask {
    /// 0/1 multiplier per expert neuron, keyed by `(layer, expert)`.
    pub expert_neurons: BTreeMap<(usize, usize), Vec<f64>>,
    /// 0/1 multiplier per dense FFN neuron, keyed by layer.
    pub ffn_neurons: BTreeMap<usize, Vec<f64>>,
    /// 0/1 multiplier per attention-output column (`n_head_q * d_head`).
    pub head_columns: BTreeMap<usize, Vec<f64>>,
    /// `true` marks an expert removed from routing.
    pub dropped_experts: BTreeMap<usize, Vec<bool>>,
}

impl ForwardMask {
    pub fn is_empty(&self) -> bool {
        self.expert_neurons.is_empty()
            && self.ffn_neurons.is_empty()
            && self.head_columns.is_empty()
            && self.dropped_experts.is_empty()
    }

    /// Unmasked neurons of one expert, if that expert carries a mask.
    pub fn active_expert_neurons(&self, layer: usize, expert: usize) -> Option<usize> {
        self.expert_neurons.get(&(layer, expert)).map(|m| m.iter().filter(|&&x| x != 0.0).count())
    }
}

/// Tape handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N x vocab_size` logits.
    pub logits: Var,
    /// Mean balance value over MoE layers, on the tape.
    pub aux: Option<Var>,
    pub routing: Vec<RoutingStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamRegistry,
}

fn expected_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>, PrunableAxis)> {
    let d = c.d_model;
    let q = c.n_head_q * c.d_head;
    let kv = c.n_head_kv * c.d_head;
    let mut out = vec![
        (names::EMBED.to_string(), vec![c.vocab_size, d], PrunableAxis::None),
        (names::UNEMBED.to_string(), vec![d, c.vocab_size], PrunableAxis::None),
        (names::FINAL_NORM.to_string(), vec![d], PrunableAxis::None),
    ];
    for l in 0..c.n_layer {
        let group = PrunableAxis::GqaGroup { layer: l };
        out.push((names::attn_norm(l), vec![d], PrunableAxis::None));
        out.push((names::ffn_norm(l), vec![d], PrunableAxis::None));
        out.push((names::wq(l), vec![d, q], group));
        out.push((names::wk(l), vec![d, kv], group));
        out.push((names::wv(l), vec![d, kv], group));
        out.push((names::wo(l), vec![q, d], group));
        match c.arch_kind {
            ArchKind::Moe => {
                out.push((names::router(l), vec![d, c.n_expert], PrunableAxis::None));
                for e in 0..c.n_expert {
                    let axis = PrunableAxis::ExpertNeuron { layer: l, expert: e };
                    out.push((names::expert(l, e, 1), vec![d, c.d_expert], axis));
                    out.push((names::expert(l, e, 2), vec![d, c.d_expert], axis));
                    out.push((names::expert(l, e, 3), vec![c.d_expert, d], axis));
                }
            }
            ArchKind::DenseFfn => {
                let axis = PrunableAxis::FfnNeuron { layer: l };
                out.push((names::ffn(l, 1), vec![d, c.d_ffn], axis));
                out.push((names::ffn(l, 2), vec![d, c.d_ffn], axis));
                out.push((names::ffn(l, 3), vec![c.d_ffn, d], axis));
            }
        }
    }
    out
}

fn is_residual_output(name: &str) -> bool {
    name.ends_with(".wo") || name.ends_with(".w3")
}

impl Model {
    /// Scaled-normal initialization, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut shapes = expected_shapes(&config);
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layer as f64).sqrt()).expect("valid std");
        let mut params = ParamRegistry::new();
        for (name, shape, axis) in shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if shape.len() == 1 {
                vec![1.0; n]
            } else if is_residual_output(&name) {
                (0..n).map(|_| resid.sample(&mut rng)).collect()
            } else {
                (0..n).map(|_| base.sample(&mut rng)).collect()
            };
            params.register(name, Tensor::new(shape, data)?, axis)?;
        }
        Ok(Self { config, params })
    }

    /// Assemble a model from stored parts, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        model.check_consistency()?;
        Ok(model)
    }

    pub fn check_consistency(&self) -> Result<()> {
        let expected = expected_shapes(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "registry holds {} tensors, config implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            let t = self.params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { op: "registry", shapes: vec![t.shape().to_vec(), shape] });
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    pub(crate) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// Overwrite one parameter tensor; the shape must not change.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let cur = self.params.get(name)?;
        if cur.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch { op: "set_param", shapes: vec![cur.shape().to_vec(), tensor.shape().to_vec()] });
        }
        self.params.replace(name, tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Put every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, entry)| {
                let v = if trainable {
                    tape.param(name, entry.tensor.clone())
                } else {
                    tape.constant(entry.tensor.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layer {
            return Err(Error::IndexOutOfRange { what: "layer", index: layer, limit: self.config.n_layer });
        }
        Ok(())
    }

    fn check_expert(&self, layer: usize, e: usize) -> Result<()> {
        self.check_layer(layer)?;
        if !self.config.is_moe() {
            return Err(Error::WrongArch { expected: "moe".into(), found: self.config.arch_kind.to_string() });
        }
        if e >= self.config.n_expert {
            return Err(Error::IndexOutOfRange { what: "expert", index: e, limit: self.config.n_expert });
        }
        Ok(())
    }

    /// GLU expert on a single vector: `(GELU(x W1) * x W2) W3`.
    pub fn expert_forward(&self, x: &[f64], e: usize, layer: usize) -> Result<Vec<f64>> {
        self.check_expert(layer, e)?;
        if x.len() != self.config.d_model {
            return Err(Error::ShapeMismatch { op: "expert_forward", shapes: vec![vec![x.len()], vec![self.config.d_model]] });
        }
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let a = tensor::matmul(&xt, self.param(&names::expert(layer, e, 1))?)?;
        let b = tensor::matmul(&xt, self.param(&names::expert(layer, e, 2))?)?;
        let h: Vec<f64> = a.data().iter().zip(b.data()).map(|(&p, &q)| tensor::gelu(p) * q).collect();
        let ht = Tensor::new(vec![1, h.len()], h)?;
        Ok(tensor::matmul(&ht, self.param(&names::expert(layer, e, 3))?)?.into_data())
    }

    /// Top-k routing of a single vector; gates are a softmax over the
    /// selected logits only.
    pub fn route(&self, x: &[f64], layer: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_expert(layer, 0)?;
        if x.len() != self.config.d_model {
            return Err(Error::ShapeMismatch { op: "route", shapes: vec![vec![x.len()], vec![self.config.d_model]] });
        }
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let logits = tensor::matmul(&xt, self.param(&names::router(layer))?)?;
        let idx = tensor::topk_indices(logits.data(), self.config.top_k);
        let sel: Vec<f64> = idx.iter().map(|&i| logits.data()[i]).collect();
        let mut gates = vec![0.0; sel.len()];
        tensor::softmax_row(&sel, &mut gates);
        Ok((idx, gates))
    }

    /// Sparse MoE sublayer on an `N x d_model` input.
    ///
    /// Returns the mixture output, routing counters and the per-layer
    /// balance value as a tape variable.
    pub fn moe_layer_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        layer: usize,
        mask: Option<&ForwardMask>,
    ) -> Result<(Var, RoutingStats, Var)> {
        self.check_expert(layer, 0)?;
        let c = &self.config;
        let n = tape.value(x).rows();
        let n_exp = c.n_expert;
        let mut logits = tape.matmul(x, bound.var(&names::router(layer))?)?;
        let mut stats = RoutingStats::new(n_exp, c.top_k);
        if let Some(dropped) = mask.and_then(|m| m.dropped_experts.get(&layer)) {
            if dropped.len() != n_exp {
                return Err(Error::ShapeMismatch { op: "drop_mask", shapes: vec![vec![dropped.len()], vec![n_exp]] });
            }
            stats.active = dropped.iter().map(|d| !d).collect();
            if stats.n_active() < c.top_k {
                return Err(Error::InvalidDecision("fewer active experts than top_k".into()));
            }
            logits = tape.masked_fill(logits, dropped.repeat(n))?;
        }
        let selected = tensor::topk_rows(tape.value(logits), c.top_k);
        let mut not_selected = vec![true; n * n_exp];
        let mut tokens_of: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
        for (t, sel) in selected.iter().enumerate() {
            for &e in sel {
                not_selected[t * n_exp + e] = false;
                tokens_of[e].push(t);
                stats.counts[e] += 1;
            }
        }
        let sel_logits = tape.masked_fill(logits, not_selected)?;
        let gates = tape.softmax(sel_logits)?;
        let probs = tape.softmax(logits)?;
        stats.tokens = n;
        for t in 0..n {
            for e in 0..n_exp {
                stats.gate_mass[e] += tape.value(gates).get2(t, e);
                stats.prob_sum[e] += tape.value(probs).get2(t, e);
            }
        }

        let mut out: Option<Var> = None;
        for (e, idx) in tokens_of.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(x, idx)?;
            let neuron_mask = mask.and_then(|m| m.expert_neurons.get(&(layer, e)));
            let ye = self.glu(tape, bound, xe, [1, 2, 3].map(|w| names::expert(layer, e, w)), neuron_mask)?;
            let gcol = tape.slice_cols(gates, e, e + 1)?;
            let ge = tape.gather_rows(gcol, idx)?;
            let weighted = tape.mul_col(ye, ge)?;
            let scattered = tape.scatter_rows(weighted, idx, n)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, scattered)?,
                None => scattered,
            });
        }
        let out = out.expect("every token selects top_k >= 1 experts");

        let frac = Tensor::new(vec![1, n_exp], stats.selection_fraction())?;
        let frac = tape.constant(frac);
        let mean_p = tape.mean_axis(probs, 0)?;
        let fp = tape.mul(mean_p, frac)?;
        let fp = tape.sum(fp)?;
        let aux = tape.scale(fp, stats.n_active() as f64)?;
        Ok((out, stats, aux))
    }

    fn glu(&self, tape: &mut Tape, bound: &Bound, x: Var, w: [String; 3], neuron_mask: Option<&Vec<f64>>) -> Result<Var> {
        let a = tape.matmul(x, bound.var(&w[0])?)?;
        let a = tape.gelu(a)?;
        let b = tape.matmul(x, bound.var(&w[1])?)?;
        let mut h = tape.mul(a, b)?;
        if let Some(m) = neuron_mask {
            let mv = tape.constant(Tensor::new(vec![m.len()], m.clone())?);
            h = tape.mul_row(h, mv)?;
        }
        tape.matmul(h, bound.var(&w[2])?)
    }

    /// Dense GLU feed-forward sublayer.
    pub fn ffn_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: usize, mask: Option<&ForwardMask>) -> Result<Var> {
        self.check_layer(layer)?;
        if self.config.is_moe() {
            return Err(Error::WrongArch { expected: "dense_ffn".into(), found: "moe".into() });
        }
        let m = mask.and_then(|m| m.ffn_neurons.get(&layer));
        self.glu(tape, bound, x, [1, 2, 3].map(|w| names::ffn(layer, w)), m)
    }

    /// Causal grouped-query attention sublayer on consecutive sequences of
    /// `seq_len` rows.
    pub fn gqa_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        layer: usize,
        seq_len: usize,
        mask: Option<&ForwardMask>,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let c = &self.config;
        if seq_len > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: seq_len, max: c.max_seq_len });
        }
        let q = tape.matmul(x, bound.var(&names::wq(layer))?)?;
        let k = tape.matmul(x, bound.var(&names::wk(layer))?)?;
        let v = tape.matmul(x, bound.var(&names::wv(layer))?)?;
        let q = tape.rope(q, c.n_head_q, c.d_head, seq_len, ROPE_BASE)?;
        let k = tape.rope(k, c.n_head_kv, c.d_head, seq_len, ROPE_BASE)?;
        let geom = AttnGeom { seq_len, n_head_q: c.n_head_q, n_head_kv: c.n_head_kv, d_head: c.d_head };
        let mut o = tape.causal_attention(q, k, v, geom)?;
        if let Some(cols) = mask.and_then(|m| m.head_columns.get(&layer)) {
            let mv = tape.constant(Tensor::new(vec![cols.len()], cols.clone())?);
            o = tape.mul_row(o, mv)?;
        }
        tape.matmul(o, bound.var(&names::wo(layer))?)
    }

    /// Full forward over `tokens`, a concatenation of sequences of
    /// `seq_len` tokens each.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        seq_len: usize,
        trainable: bool,
        mask: Option<&ForwardMask>,
    ) -> Result<ForwardOutput> {
        let bound = self.bind(tape, trainable);
        self.forward_bound(tape, &bound, tokens, seq_len, mask)
    }

    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[u32],
        seq_len: usize,
        mask: Option<&ForwardMask>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Empty("no tokens".into()));
        }
        if seq_len > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: seq_len, max: c.max_seq_len });
        }
        if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::ShapeMismatch { op: "forward", shapes: vec![vec![tokens.len()], vec![seq_len]] });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::IndexOutOfRange { what: "token", index: bad as usize, limit: c.vocab_size });
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather_rows(bound.var(names::EMBED)?, &idx)?;
        let mut routing = Vec::new();
        let mut aux_terms = Vec::new();
        for l in 0..c.n_layer {
            let h = tape.rms_norm(x, bound.var(&names::attn_norm(l))?, NORM_EPS)?;
            let a = self.gqa_forward(tape, bound, h, l, seq_len, mask)?;
            x = tape.add(x, a)?;
            let h = tape.rms_norm(x, bound.var(&names::ffn_norm(l))?, NORM_EPS)?;
            let m = if c.is_moe() {
                let (m, stats, aux) = self.moe_layer_forward(tape, bound, h, l, mask)?;
                routing.push(stats);
                aux_terms.push(aux);
                m
            } else {
                self.ffn_forward(tape, bound, h, l, mask)?
            };
            x = tape.add(x, m)?;
        }
        let x = tape.rms_norm(x, bound.var(names::FINAL_NORM)?, NORM_EPS)?;
        let logits = tape.matmul(x, bound.var(names::UNEMBED)?)?;
        let aux = if aux_terms.is_empty() {
            None
        } else {
            let mut acc = aux_terms[0];
            for &t in &aux_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(tape.scale(acc, 1.0 / aux_terms.len() as f64)?)
        };
        Ok(ForwardOutput { logits, aux, routing })
    }

    /// Inference-only logits.
    pub fn logits(&self, tokens: &[u32], seq_len: usize, mask: Option<&ForwardMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, seq_len, false, mask)?;
        Ok(tape.value(out.logits).clone())
    }
}

#[cfg(test)]
mod oracle;
