//! Sensitivity scoring, prune decisions and structural edits.

mod edit;

pub use edit::{apply_decision, drop_experts, masked_forward_setup, prune_gqa_groups, slim_dense_ffn, slim_experts};

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{clm_loss, kd_topk_loss, LossKind, TeacherCache};
use crate::error::{Error, Result};
use crate::eval::flatten_batch;
use crate::model::{names, ForwardMask, Model, ModelConfig};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::model::ParamRegistry;

/// Held-out sample of training sequences used only for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub seq_len: usize,
    pub seed: u64,
    /// Indices into the training split.
    pub ids: Vec<usize>,
    /// Sequences per backward pass.
    pub micro_batch: usize,
}

impl CalibrationSet {
    /// Up to `count` distinct training sequences, uniformly at random.
    pub fn sample(n_train: usize, count: usize, seq_len: usize, micro_batch: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || count == 0 || micro_batch == 0 {
            return Err(Error::Empty("calibration set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = sample(&mut rng, n_train, count.min(n_train)).into_vec();
        ids.sort_unstable();
        Ok(Self { seq_len, seed, ids, micro_batch })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.ids.chunks(self.micro_batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertCriterion {
    /// Summed weight sensitivity over the expert's matrices.
    KlSum,
    /// Top-k selection count on the calibration data.
    Frequency,
}

/// Scores of one calibration pass plus their aggregations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub id: String,
    pub loss_kind: Option<LossKind>,
    pub batches: usize,
    /// `|grad * weight|` averaged over micro-batches, per tensor.
    #[serde(skip)]
    pub param_scores: BTreeMap<String, Tensor>,
    /// `[layer][expert][neuron]`
    pub neuron_scores: Vec<Vec<Vec<f64>>>,
    /// `[layer][neuron]`, dense models only.
    pub ffn_neuron_scores: Vec<Vec<f64>>,
    /// `[layer][group]`
    pub group_scores: Vec<Vec<f64>>,
    /// `[layer][expert]`
    pub expert_scores: Vec<Vec<f64>>,
    pub expert_criterion: Option<ExpertCriterion>,
    /// `[layer][expert]`
    pub freq_counts: Vec<Vec<u64>>,
}

/// `|g * w|` for every parameter that has a gradient.
pub fn weight_scores(params: &ParamRegistry, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, entry) in params.iter() {
        let Some(g) = grads.get(name) else { continue };
        let w = &entry.tensor;
        if g.shape() != w.shape() {
            return Err(Error::ShapeMismatch { op: "weight_scores", shapes: vec![w.shape().to_vec(), g.shape().to_vec()] });
        }
        let data = w.data().iter().zip(g.data()).map(|(a, b)| (a * b).abs()).collect();
        out.insert(name.clone(), Tensor::new(w.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// First-order sensitivity of every weight on the calibration set.
///
/// Scores are computed per micro-batch and their absolute values averaged.
pub fn param_sensitivity(
    model: &Model,
    teacher: Option<&TeacherCache>,
    train: &[Vec<u32>],
    calib: &CalibrationSet,
    loss_kind: LossKind,
    renormalize: bool,
) -> Result<SensitivityReport> {
    param_sensitivity_masked(model, teacher, train, calib, loss_kind, renormalize, None)
}

/// [`param_sensitivity`] with the forward pass running under `mask`.
pub fn param_sensitivity_masked(
    model: &Model,
    teacher: Option<&TeacherCache>,
    train: &[Vec<u32>],
    calib: &CalibrationSet,
    loss_kind: LossKind,
    renormalize: bool,
    mask: Option<&ForwardMask>,
) -> Result<SensitivityReport> {
    if calib.ids.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    if loss_kind == LossKind::KdTopk && teacher.is_none() {
        return Err(Error::Missing("teacher cache for kd_topk scoring".into()));
    }
    let c = model.config();
    let l = calib.seq_len;
    let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut freq = vec![vec![0u64; if c.is_moe() { c.n_expert } else { 0 }]; if c.is_moe() { c.n_layer } else { 0 }];
    let mut batches = 0usize;
    for ids in calib.batches() {
        let refs: Vec<&[u32]> = ids
            .iter()
            .map(|&i| train.get(i).map(|s| s.as_slice()).ok_or(Error::IndexOutOfRange { what: "calibration id", index: i, limit: train.len() }))
            .collect::<Result<_>>()?;
        let (inputs, targets) = flatten_batch(&refs, l);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs, l, true, mask)?;
        let loss = match loss_kind {
            LossKind::Clm => clm_loss(&mut tape, out.logits, &targets)?,
            LossKind::KdTopk => {
                let t = teacher.expect("checked above").targets(ids, l)?;
                kd_topk_loss(&mut tape, out.logits, &t, renormalize)?
            }
        };
        for (layer, s) in out.routing.iter().enumerate() {
            for (e, &n) in s.counts.iter().enumerate() {
                freq[layer][e] += n;
            }
        }
        let grads = tape.backward(loss)?;
        for (name, s) in weight_scores(model.params(), &grads)? {
            match sums.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b),
                None => {
                    sums.insert(name, s);
                }
            }
        }
        batches += 1;
    }
    for t in sums.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x /= batches as f64);
    }
    let mut h = Sha256::new();
    h.update(crate::distill::teacher_fingerprint(model).to_le_bytes());
    h.update(serde_json::to_vec(calib)?);
    h.update(format!("{loss_kind:?}").as_bytes());
    let id: String = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(SensitivityReport { id, loss_kind: Some(loss_kind), batches, param_scores: sums, freq_counts: freq, ..Default::default() })
}

fn scores_of<'a>(report: &'a SensitivityReport, name: &str) -> Result<&'a Tensor> {
    report.param_scores.get(name).ok_or_else(|| Error::Missing(format!("scores for {name}")))
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// Neuron score = l2 norm of the neuron's row in the down projection.
pub fn neuron_scores(mut report: SensitivityReport, config: &ModelConfig) -> Result<SensitivityReport> {
    if config.is_moe() {
        report.neuron_scores = (0..config.n_layer)
            .map(|l| (0..config.n_expert).map(|e| Ok(row_norms(scores_of(&report, &names::expert(l, e, 3))?))).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
    } else {
        report.ffn_neuron_scores = (0..config.n_layer)
            .map(|l| Ok(row_norms(scores_of(&report, &names::ffn(l, 3))?)))
            .collect::<Result<_>>()?;
    }
    Ok(report)
}

/// Group score = mean W_O row norm over every row of the group's query
/// heads.
pub fn gqa_group_scores(mut report: SensitivityReport, config: &ModelConfig) -> Result<SensitivityReport> {
    let gs = config.group_size();
    let rows_per_group = gs * config.d_head;
    let mut out = Vec::with_capacity(config.n_layer);
    for l in 0..config.n_layer {
        let s = scores_of(&report, &names::wo(l))?;
        if s.rows() != config.n_head_q * config.d_head {
            return Err(Error::ShapeMismatch { op: "gqa_group_scores", shapes: vec![s.shape().to_vec(), vec![config.n_head_q * config.d_head]] });
        }
        let norms = row_norms(s);
        out.push(norms.chunks(rows_per_group).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect());
    }
    report.group_scores = out;
    Ok(report)
}

pub fn expert_level_scores(mut report: SensitivityReport, config: &ModelConfig, mode: ExpertCriterion) -> Result<SensitivityReport> {
    if !config.is_moe() {
        return Err(Error::WrongArch { expected: "moe".into(), found: config.arch_kind.to_string() });
    }
    report.expert_scores = match mode {
        ExpertCriterion::KlSum => (0..config.n_layer)
            .map(|l| {
                (0..config.n_expert)
                    .map(|e| {
                        let mut s = 0.0;
                        for w in 1..=3 {
                            s += scores_of(&report, &names::expert(l, e, w))?.data().iter().sum::<f64>();
                        }
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?,
        ExpertCriterion::Frequency => {
            if report.freq_counts.len() != config.n_layer {
                return Err(Error::Missing("routing counts".into()));
            }
            report.freq_counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect()
        }
    };
    report.expert_criterion = Some(mode);
    Ok(report)
}

/// Every aggregation that applies to the model's architecture.
pub fn aggregate(report: SensitivityReport, config: &ModelConfig, expert_mode: ExpertCriterion) -> Result<SensitivityReport> {
    let r = neuron_scores(report, config)?;
    let r = gqa_group_scores(r, config)?;
    if config.is_moe() {
        expert_level_scores(r, config, expert_mode)
    } else {
        Ok(r)
    }
}

/// Indices of the `n` highest scores, ties to the lower index, returned
/// in ascending order.
pub fn keep_top(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(n).collect();
    kept.sort_unstable();
    kept
}

/// `round(d * ratio)`, at least one.
pub fn keep_count(d: usize, ratio: f64) -> usize {
    ((d as f64 * ratio).round() as usize).clamp(1, d)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub report_id: String,
    pub criterion: String,
    pub ratio: f64,
}

/// Kept units per layer; `None` leaves that axis untouched.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// `[layer][expert]` kept neurons.
    pub expert_neurons: Option<Vec<Vec<Vec<usize>>>>,
    /// `[layer]` kept dense FFN neurons.
    pub ffn_neurons: Option<Vec<Vec<usize>>>,
    /// `[layer]` kept GQA groups.
    pub groups: Option<Vec<Vec<usize>>>,
    /// `[layer]` kept experts.
    pub experts: Option<Vec<Vec<usize>>>,
    pub provenance: Provenance,
}

fn check_kept(set: &[usize], limit: usize, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidDecision(format!("empty kept {what} set")));
    }
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidDecision(format!("kept {what} set not sorted and unique")));
    }
    if let Some(&bad) = set.last().filter(|&&x| x >= limit) {
        return Err(Error::InvalidDecision(format!("kept {what} index {bad} >= {limit}")));
    }
    Ok(())
}

impl PruneDecision {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let layers = |n: usize| {
            if n != config.n_layer {
                Err(Error::InvalidDecision(format!("decision covers {n} layers, model has {}", config.n_layer)))
            } else {
                Ok(())
            }
        };
        if let Some(en) = &self.expert_neurons {
            if !config.is_moe() {
                return Err(Error::WrongArch { expected: "moe".into(), found: config.arch_kind.to_string() });
            }
            layers(en.len())?;
            let count = en.first().and_then(|l| l.first()).map(|k| k.len()).unwrap_or(0);
            for per_layer in en {
                if per_layer.len() != config.n_expert {
                    return Err(Error::InvalidDecision("expert count mismatch in neuron decision".into()));
                }
                for kept in per_layer {
                    check_kept(kept, config.d_expert, "neuron")?;
                    if kept.len() != count {
                        return Err(Error::InvalidDecision("non-uniform kept neuron counts".into()));
                    }
                }
            }
        }
        if let Some(f) = &self.ffn_neurons {
            if config.is_moe() {
                return Err(Error::WrongArch { expected: "dense_ffn".into(), found: "moe".into() });
            }
            layers(f.len())?;
            for kept in f {
                check_kept(kept, config.d_ffn, "ffn neuron")?;
                if kept.len() != f[0].len() {
                    return Err(Error::InvalidDecision("non-uniform kept ffn counts".into()));
                }
            }
        }
        if let Some(g) = &self.groups {
            layers(g.len())?;
            for kept in g {
                check_kept(kept, config.n_head_kv, "group")?;
                if kept.len() != g[0].len() {
                    return Err(Error::InvalidDecision("non-uniform kept group counts".into()));
                }
            }
        }
        if let Some(x) = &self.experts {
            if !config.is_moe() {
                return Err(Error::WrongArch { expected: "moe".into(), found: config.arch_kind.to_string() });
            }
            layers(x.len())?;
            for kept in x {
                check_kept(kept, config.n_expert, "expert")?;
                if kept.len() != x[0].len() {
                    return Err(Error::InvalidDecision("non-uniform kept expert counts".into()));
                }
                if kept.len() < config.top_k {
                    return Err(Error::InvalidDecision(format!("{} experts kept, top_k is {}", kept.len(), config.top_k)));
                }
            }
        }
        Ok(())
    }

    /// Keep the top `keep` neurons of every expert.
    pub fn slim_experts(report: &SensitivityReport, keep: usize) -> Result<Self> {
        if report.neuron_scores.is_empty() {
            return Err(Error::Missing("neuron scores".into()));
        }
        let kept = report.neuron_scores.iter().map(|l| l.iter().map(|s| keep_top(s, keep)).collect()).collect();
        Ok(Self { expert_neurons: Some(kept), provenance: prov(report, "expert_slim"), ..Default::default() })
    }

    pub fn slim_ffn(report: &SensitivityReport, keep: usize) -> Result<Self> {
        if report.ffn_neuron_scores.is_empty() {
            return Err(Error::Missing("ffn neuron scores".into()));
        }
        let kept = report.ffn_neuron_scores.iter().map(|s| keep_top(s, keep)).collect();
        Ok(Self { ffn_neurons: Some(kept), provenance: prov(report, "ffn_slim"), ..Default::default() })
    }

    pub fn prune_groups(report: &SensitivityReport, keep: usize) -> Result<Self> {
        if report.group_scores.is_empty() {
            return Err(Error::Missing("group scores".into()));
        }
        let kept = report.group_scores.iter().map(|s| keep_top(s, keep)).collect();
        Ok(Self { groups: Some(kept), provenance: prov(report, "gqa_group"), ..Default::default() })
    }

    pub fn drop_experts(report: &SensitivityReport, keep: usize) -> Result<Self> {
        if report.expert_scores.is_empty() {
            return Err(Error::Missing("expert scores".into()));
        }
        let kept = report.expert_scores.iter().map(|s| keep_top(s, keep)).collect();
        let crit = match report.expert_criterion {
            Some(ExpertCriterion::Frequency) => "drop_expert_frequency",
            _ => "drop_expert_kl",
        };
        Ok(Self { experts: Some(kept), provenance: prov(report, crit), ..Default::default() })
    }

    /// Union of two decisions on disjoint axes.
    pub fn merge(mut self, other: PruneDecision) -> Self {
        self.expert_neurons = self.expert_neurons.or(other.expert_neurons);
        self.ffn_neurons = self.ffn_neurons.or(other.ffn_neurons);
        self.groups = self.groups.or(other.groups);
        self.experts = self.experts.or(other.experts);
        self
    }

    /// A decision keeping everything.
    pub fn keep_all(config: &ModelConfig) -> Self {
        let all = |n: usize| (0..n).collect::<Vec<_>>();
        let mut d = Self { groups: Some(vec![all(config.n_head_kv); config.n_layer]), ..Default::default() };
        if config.is_moe() {
            d.expert_neurons = Some(vec![vec![all(config.d_expert); config.n_expert]; config.n_layer]);
            d.experts = Some(vec![all(config.n_expert); config.n_layer]);
        } else {
            d.ffn_neurons = Some(vec![all(config.d_ffn); config.n_layer]);
        }
        d.provenance.criterion = "identity".into();
        d.provenance.ratio = 1.0;
        d
    }
}

fn prov(report: &SensitivityReport, criterion: &str) -> Provenance {
    Provenance { report_id: report.id.clone(), criterion: criterion.into(), ratio: 0.0 }
}
