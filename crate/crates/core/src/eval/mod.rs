//! Evaluation metrics, routing statistics, expert similarity and reports.

mod corpus;
mod report;

pub use corpus::{answer_mask, gen_synthetic_corpus, Corpus, MarkovChain, TaskKind, TaskSpec, COPY_DELIM, COPY_FILL, MARKOV_FANOUT};
pub use report::{emit_report, read_metric_rows, resample_curve, write_metric_rows, ArmSummary, Comparison, MetricRow, ReportSummary, RunRecord, REPORT_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ForwardMask, Model, RoutingStats};
use crate::tape::Tape;
use crate::tensor;

/// Sequences per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

/// Split `seq_len + 1` windows into flat inputs and targets.
pub fn flatten_batch(seqs: &[&[u32]], seq_len: usize) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = Vec::with_capacity(seqs.len() * seq_len);
    let mut targets = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        inputs.extend_from_slice(&s[..seq_len]);
        targets.extend_from_slice(&s[1..seq_len + 1]);
    }
    (inputs, targets)
}

fn check_windows(seqs: &[Vec<u32>], seq_len: usize) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() != seq_len + 1) {
        return Err(Error::ShapeMismatch { op: "evaluate", shapes: vec![vec![s.len()], vec![seq_len + 1]] });
    }
    Ok(())
}

/// Mean next-token cross-entropy and argmax accuracy.
pub fn evaluate(model: &Model, seqs: &[Vec<u32>], seq_len: usize, mask: Option<&ForwardMask>) -> Result<EvalResult> {
    check_windows(seqs, seq_len)?;
    let mut nll = 0.0;
    let mut hits = 0usize;
    let mut n = 0usize;
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let (inputs, targets) = flatten_batch(&refs, seq_len);
        let logits = model.logits(&inputs, seq_len, mask)?;
        let lsm = tensor::log_softmax(&logits)?;
        for (t, &y) in targets.iter().enumerate() {
            let row = lsm.row(t);
            let y = y as usize;
            if y >= row.len() {
                return Err(Error::IndexOutOfRange { what: "target", index: y, limit: row.len() });
            }
            nll -= row[y];
            hits += (tensor::topk_indices(row, 1)[0] == y) as usize;
            n += 1;
        }
    }
    Ok(EvalResult { cross_entropy: nll / n as f64, accuracy: hits as f64 / n as f64, tokens: n })
}

/// Routing counters per MoE layer over `seqs`.
pub fn routing_stats(model: &Model, seqs: &[Vec<u32>], seq_len: usize, mask: Option<&ForwardMask>) -> Result<Vec<RoutingStats>> {
    let c = model.config();
    if !c.is_moe() {
        return Err(Error::WrongArch { expected: "moe".into(), found: c.arch_kind.to_string() });
    }
    check_windows(seqs, seq_len)?;
    let mut total: Vec<RoutingStats> = Vec::new();
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let (inputs, _) = flatten_batch(&refs, seq_len);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs, seq_len, false, mask)?;
        if total.is_empty() {
            total = out.routing;
        } else {
            for (acc, s) in total.iter_mut().zip(&out.routing) {
                acc.merge(s);
            }
        }
    }
    Ok(total)
}

/// Per-token selection frequency; sums to `top_k`.
pub fn selection_frequency(stats: &RoutingStats) -> Vec<f64> {
    stats.counts.iter().map(|&c| c as f64 / stats.tokens as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width buckets over `[lo, hi]`; the last bucket is closed.
    pub fn new(values: &[f64], lo: f64, hi: f64, buckets: usize) -> Self {
        let width = (hi - lo) / buckets as f64;
        let edges = (0..=buckets).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; buckets];
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(buckets - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub layer: usize,
    pub expert_a: usize,
    pub expert_b: usize,
    /// Best cosine in expert B for each neuron of expert A.
    pub max_cosine: Vec<f64>,
    pub argmax: Vec<usize>,
    /// Neurons of A with zero norm (their similarity is reported as 0).
    pub zero_norm: Vec<usize>,
    pub histogram: Histogram,
}

pub const SIMILARITY_BUCKETS: usize = 20;

/// Neuron `i` as the concatenation of column `i` of W1, column `i` of W2 and
/// row `i` of W3.
pub fn neuron_vectors(model: &Model, layer: usize, expert: usize) -> Result<Vec<Vec<f64>>> {
    let c = model.config();
    if !c.is_moe() {
        return Err(Error::WrongArch { expected: "moe".into(), found: c.arch_kind.to_string() });
    }
    if layer >= c.n_layer || expert >= c.n_expert {
        return Err(Error::IndexOutOfRange { what: "expert", index: expert, limit: c.n_expert });
    }
    let w1 = model.param(&names::expert(layer, expert, 1))?;
    let w2 = model.param(&names::expert(layer, expert, 2))?;
    let w3 = model.param(&names::expert(layer, expert, 3))?;
    let (d, de) = w1.dims2();
    Ok((0..de)
        .map(|i| {
            let mut v = Vec::with_capacity(3 * d);
            v.extend((0..d).map(|r| w1.get2(r, i)));
            v.extend((0..d).map(|r| w2.get2(r, i)));
            v.extend_from_slice(w3.row(i));
            v
        })
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn expert_similarity(model: &Model, layer: usize, a: usize, b: usize) -> Result<SimilarityResult> {
    let va = neuron_vectors(model, layer, a)?;
    let vb = neuron_vectors(model, layer, b)?;
    let nb: Vec<f64> = vb.iter().map(|v| norm(v)).collect();
    let mut max_cosine = Vec::with_capacity(va.len());
    let mut argmax = Vec::with_capacity(va.len());
    let mut zero_norm = Vec::new();
    for (i, x) in va.iter().enumerate() {
        let nx = norm(x);
        if nx == 0.0 {
            zero_norm.push(i);
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, y) in vb.iter().enumerate() {
            let cos = if nx == 0.0 || nb[j] == 0.0 {
                0.0
            } else {
                x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * nb[j])
            };
            if cos > best.0 {
                best = (cos, j);
            }
        }
        max_cosine.push(best.0);
        argmax.push(best.1);
    }
    let histogram = Histogram::new(&max_cosine, -1.0, 1.0, SIMILARITY_BUCKETS);
    Ok(SimilarityResult { layer, expert_a: a, expert_b: b, max_cosine, argmax, zero_norm, histogram })
}

/// Similarity for every ordered pair of distinct experts in `layer`.
pub fn all_pairs_similarity(model: &Model, layer: usize) -> Result<Vec<SimilarityResult>> {
    let n = model.config().n_expert;
    let mut out = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                out.push(expert_similarity(model, layer, a, b)?);
            }
        }
    }
    Ok(out)
}
