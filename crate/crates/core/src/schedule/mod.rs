//! Compression schedules, run orchestration and compute accounting.

mod run;

pub use run::{
    read_metric_log, run_iterative, run_multistage, run_oneshot, train_teacher, write_metric_log, IterativeSchedule, RunInputs,
    RunOutcome, RunSpec,
};

use serde::{Deserialize, Serialize};

use crate::distill::StopRule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::keep_count;

/// Default rounding unit for intermediate pruned widths.
pub const GRANULE: usize = 16;
/// Default share of the token budget spent before the final stage.
pub const INIT_SHARE: f64 = 0.35;

/// One prune-then-distill stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTarget {
    /// Expert width for MoE models, FFN width for dense ones.
    pub width: usize,
    pub n_head_q: usize,
    pub n_head_kv: usize,
    /// Experts kept per layer; `None` keeps them all.
    #[serde(default)]
    pub n_expert: Option<usize>,
    pub token_budget: u64,
    pub stop: StopRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub alpha: f64,
    pub t: usize,
    pub stages: Vec<StageTarget>,
}

/// Per-stage replacement dims; `None` fields keep the geometric value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOverride {
    pub width: Option<usize>,
    /// `(n_head_q, n_head_kv)`
    pub heads: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub granule: usize,
    /// Overall keep ratio for GQA groups; `None` leaves attention intact.
    pub kv_alpha: Option<f64>,
    /// Indexed by stage; shorter than `t` leaves later stages geometric.
    pub overrides: Vec<StageOverride>,
    pub total_tokens: u64,
    pub init_share: f64,
    pub intermediate_stop: StopRule,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            granule: GRANULE,
            kv_alpha: None,
            overrides: Vec::new(),
            total_tokens: 0,
            init_share: INIT_SHARE,
            intermediate_stop: StopRule::Plateau,
        }
    }
}

fn base_width(c: &ModelConfig) -> usize {
    if c.is_moe() {
        c.d_expert
    } else {
        c.d_ffn
    }
}

fn round_to(x: f64, g: usize) -> usize {
    ((x / g as f64).round() as usize) * g
}

/// Geometric shrink schedule: stage `t` of `T` targets `dim * alpha^(t/T)`,
/// rounded to the granule, and the last stage lands exactly on
/// `round(dim * alpha)`.
pub fn geometric_plan(alpha: f64, t: usize, base: &ModelConfig, opts: &PlanOptions) -> Result<StagePlan> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidPlan(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if t == 0 {
        return Err(Error::InvalidPlan("stage count must be >= 1".into()));
    }
    if opts.granule == 0 || !(0.0..1.0).contains(&opts.init_share) {
        return Err(Error::InvalidPlan("granule must be >= 1 and init_share in [0, 1)".into()));
    }
    if opts.overrides.len() > t {
        return Err(Error::InvalidPlan(format!("{} overrides for {t} stages", opts.overrides.len())));
    }
    let dim = base_width(base);
    let target = keep_count(dim, alpha);
    let gs = base.group_size();
    let kv_target = opts.kv_alpha.map(|a| keep_count(base.n_head_kv, a));
    let init_tokens = (opts.total_tokens as f64 * opts.init_share).round() as u64;
    let per_init = if t > 1 { init_tokens / (t as u64 - 1) } else { 0 };

    let mut stages = Vec::with_capacity(t);
    let (mut prev_w, mut prev_kv) = (dim, base.n_head_kv);
    for s in 1..=t {
        let last = s == t;
        let frac = s as f64 / t as f64;
        let mut width = if last { target } else { round_to(dim as f64 * alpha.powf(frac), opts.granule).clamp(target, dim) };
        let mut kv = match (opts.kv_alpha, kv_target) {
            (Some(_), Some(k)) if last => k,
            (Some(a), Some(k)) => ((base.n_head_kv as f64 * a.powf(frac)).round() as usize).clamp(k, base.n_head_kv),
            _ => base.n_head_kv,
        };
        let mut q = kv * gs;
        if let Some(o) = opts.overrides.get(s - 1) {
            if let Some(w) = o.width {
                if last && w != target {
                    return Err(Error::InvalidPlan(format!("final width override {w} differs from target {target}")));
                }
                width = w;
            }
            if let Some((oq, okv)) = o.heads {
                if okv == 0 || oq != okv * gs {
                    return Err(Error::InvalidPlan(format!("heads {oq}/{okv} break group size {gs}")));
                }
                if last && kv_target.is_some_and(|k| k != okv) {
                    return Err(Error::InvalidPlan("final heads override differs from target".into()));
                }
                q = oq;
                kv = okv;
            }
        }
        if width == 0 || width > prev_w || kv > prev_kv {
            return Err(Error::InvalidPlan(format!("stage {s} dims {width}, {q}/{kv} increase or vanish")));
        }
        let (token_budget, stop) = if last {
            (opts.total_tokens - per_init * (t as u64 - 1), StopRule::Budget)
        } else {
            (per_init, opts.intermediate_stop)
        };
        stages.push(StageTarget { width, n_head_q: q, n_head_kv: kv, n_expert: None, token_budget, stop });
        prev_w = width;
        prev_kv = kv;
    }
    Ok(StagePlan { alpha, t, stages })
}

/// Single-stage plan that keeps `n_expert` experts and nothing else changes.
pub fn drop_plan(base: &ModelConfig, n_expert: usize, total_tokens: u64) -> Result<StagePlan> {
    if !base.is_moe() || n_expert < base.top_k || n_expert > base.n_expert {
        return Err(Error::InvalidPlan(format!("cannot keep {n_expert} experts")));
    }
    Ok(StagePlan {
        alpha: n_expert as f64 / base.n_expert as f64,
        t: 1,
        stages: vec![StageTarget {
            width: base.d_expert,
            n_head_q: base.n_head_q,
            n_head_kv: base.n_head_kv,
            n_expert: Some(n_expert),
            token_budget: total_tokens,
            stop: StopRule::Budget,
        }],
    })
}

impl StagePlan {
    pub fn total_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.token_budget).sum()
    }

    pub fn final_stage(&self) -> &StageTarget {
        self.stages.last().expect("plans have at least one stage")
    }

    /// Config a model takes after stage `s`.
    pub fn config_after(&self, base: &ModelConfig, s: usize) -> ModelConfig {
        let st = &self.stages[s];
        let mut c = base.clone();
        if c.is_moe() {
            c.d_expert = st.width;
        } else {
            c.d_ffn = st.width;
        }
        c.n_head_q = st.n_head_q;
        c.n_head_kv = st.n_head_kv;
        if let Some(n) = st.n_expert {
            c.n_expert = n;
        }
        c
    }

    pub fn target_config(&self, base: &ModelConfig) -> ModelConfig {
        self.config_after(base, self.stages.len() - 1)
    }
}

/// Forward-plus-backward training estimate: six FLOPs per active parameter
/// per token.
pub fn flops_account(config: &ModelConfig, tokens: u64) -> u128 {
    6 * config.active_param_count() as u128 * tokens as u128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stage: usize,
    /// Whether this phase trained a full-size model under masks.
    pub masked: bool,
    pub tokens: u64,
    pub active_params: usize,
    pub flops: u128,
    pub wall_secs: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub baseline: String,
    pub stages: Vec<StageLedger>,
}

impl BudgetLedger {
    pub fn new(baseline: impl Into<String>) -> Self {
        Self { baseline: baseline.into(), stages: Vec::new() }
    }

    /// Record a phase run at `config`'s per-token cost (the full model's
    /// cost when `masked`).
    pub fn record(&mut self, stage: usize, config: &ModelConfig, tokens: u64, masked: bool, wall_secs: f64, stopped_early: bool) {
        self.stages.push(StageLedger {
            stage,
            masked,
            tokens,
            active_params: config.active_param_count(),
            flops: flops_account(config, tokens),
            wall_secs,
            stopped_early,
        });
    }

    pub fn total_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.tokens).sum()
    }

    pub fn total_flops(&self) -> u128 {
        self.stages.iter().map(|s| s.flops).sum()
    }

    /// FLOPs spent before the final stage (or in the masked phase).
    pub fn init_flops(&self, final_stage: usize) -> u128 {
        self.stages.iter().filter(|s| s.stage < final_stage || s.masked).map(|s| s.flops).sum()
    }

    pub fn init_tokens(&self, final_stage: usize) -> u64 {
        self.stages.iter().filter(|s| s.stage < final_stage || s.masked).map(|s| s.tokens).sum()
    }
}

/// Everything needed to locate and replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub arm: String,
    pub plan: StagePlan,
    pub seed: u64,
    pub total_tokens: u64,
    pub artifacts: Vec<(String, String)>,
    pub ledger: BudgetLedger,
}

#[cfg(test)]
mod tests;
