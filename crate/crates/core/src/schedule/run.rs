use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BudgetLedger, StagePlan, StageTarget};
use crate::distill::{train_phase, DistillConfig, LossKind, MetricRecord, PhaseOpts, StopRule, TeacherCache, TrainData, TrainState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::model::{ForwardMask, Model, ModelConfig};
use crate::pruning::{
    aggregate, apply_decision, keep_top, masked_forward_setup, param_sensitivity_masked, CalibrationSet,
    ExpertCriterion, PruneDecision, SensitivityReport,
};

/// Data shared by every arm of a comparison.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    /// The original full model; distillation always targets it.
    pub teacher: &'a Model,
    pub cache: &'a TeacherCache,
    pub train: &'a [Vec<u32>],
    pub eval: &'a [Vec<u32>],
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub distill: DistillConfig,
    pub score_loss: LossKind,
    pub expert_criterion: ExpertCriterion,
    pub calib_count: usize,
    pub calib_micro_batch: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            distill: DistillConfig::default(),
            score_loss: LossKind::KdTopk,
            expert_criterion: ExpertCriterion::KlSum,
            calib_count: 512,
            calib_micro_batch: 16,
        }
    }
}

/// Mask schedule of the iterative baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeSchedule {
    /// Tokens trained at full size under masks before the structural edit.
    pub masked_tokens: u64,
    /// Number of mask tightenings spread evenly over the masked phase.
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub ledger: BudgetLedger,
    pub log: Vec<MetricRecord>,
    pub decisions: Vec<PruneDecision>,
    /// Aggregated scores behind each decision, without per-weight tensors.
    pub reports: Vec<SensitivityReport>,
    pub final_eval: EvalResult,
    /// Eval loss change when the iterative masks become a structural edit.
    pub conversion_delta: Option<f64>,
    /// Set when a stage failed; the other fields hold the partial run.
    pub aborted: Option<String>,
}

fn sub_seed(seed: u64, stage: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((stage as u64) << 32) ^ salt
}

fn tokens_per_step(cfg: &DistillConfig, seq_len: usize) -> u64 {
    ((cfg.batch_tokens / seq_len).max(1) * seq_len) as u64
}

fn width_of(c: &ModelConfig) -> usize {
    if c.is_moe() {
        c.d_expert
    } else {
        c.d_ffn
    }
}

fn score(model: &Model, inp: RunInputs<'_>, spec: &RunSpec, stage: usize, mask: Option<&ForwardMask>) -> Result<SensitivityReport> {
    let calib = CalibrationSet::sample(
        inp.train.len(),
        spec.calib_count,
        inp.seq_len,
        spec.calib_micro_batch,
        sub_seed(spec.seed, stage, 0xca1b),
    )?;
    let teacher = (spec.score_loss == LossKind::KdTopk).then_some(inp.cache);
    let r = param_sensitivity_masked(model, teacher, inp.train, &calib, spec.score_loss, spec.distill.renormalize, mask)?;
    aggregate(r, model.config(), spec.expert_criterion)
}

fn without_tensors(mut r: SensitivityReport) -> SensitivityReport {
    r.param_scores.clear();
    r
}

/// Decision taking `model` to `target`'s dims.
fn stage_decision(model: &Model, target: &StageTarget, report: &SensitivityReport) -> Result<PruneDecision> {
    let c = model.config();
    let mut d = PruneDecision::default();
    if target.width < width_of(c) {
        d = if c.is_moe() { PruneDecision::slim_experts(report, target.width)? } else { PruneDecision::slim_ffn(report, target.width)? };
    } else if target.width > width_of(c) {
        return Err(Error::InvalidPlan(format!("stage width {} exceeds model width {}", target.width, width_of(c))));
    }
    if target.n_head_kv < c.n_head_kv {
        d = d.merge(PruneDecision::prune_groups(report, target.n_head_kv)?);
    }
    if let Some(n) = target.n_expert.filter(|&n| n < c.n_expert) {
        d = d.merge(PruneDecision::drop_experts(report, n)?);
    }
    d.provenance.report_id = report.id.clone();
    Ok(d)
}

fn needs_pruning(c: &ModelConfig, t: &StageTarget) -> bool {
    t.width < width_of(c) || t.n_head_kv < c.n_head_kv || t.n_expert.is_some_and(|n| n < c.n_expert)
}

fn shift_steps(records: &mut [MetricRecord], offset: u64) {
    for r in records {
        r.step += offset;
    }
}

/// Geometric prune-and-distill: every stage scores the current student,
/// prunes it structurally, then distills from the original teacher.
/// Tokens left unused by an early-stopped stage roll into the final one.
pub fn run_multistage(plan: &StagePlan, inp: RunInputs<'_>, spec: &RunSpec) -> Result<RunOutcome> {
    run_plan(plan, inp, spec, "multistage")
}

/// Prune straight to the target and distill with the whole budget.
pub fn run_oneshot(target: &StageTarget, inp: RunInputs<'_>, spec: &RunSpec) -> Result<RunOutcome> {
    let mut t = target.clone();
    t.stop = StopRule::Budget;
    let plan = StagePlan { alpha: 0.0, t: 1, stages: vec![t] };
    run_plan(&plan, inp, spec, "oneshot")
}

fn run_plan(plan: &StagePlan, inp: RunInputs<'_>, spec: &RunSpec, baseline: &str) -> Result<RunOutcome> {
    spec.distill.validate()?;
    if plan.stages.is_empty() {
        return Err(Error::InvalidPlan("plan has no stages".into()));
    }
    let tps = tokens_per_step(&spec.distill, inp.seq_len);
    let mut out = RunOutcome {
        model: inp.teacher.clone(),
        ledger: BudgetLedger::new(baseline),
        log: Vec::new(),
        decisions: Vec::new(),
        reports: Vec::new(),
        final_eval: EvalResult::default(),
        conversion_delta: None,
        aborted: None,
    };
    let (mut carry, mut tokens, mut steps) = (0u64, 0u64, 0u64);
    let last = plan.stages.len() - 1;
    for (s, target) in plan.stages.iter().enumerate() {
        let started = Instant::now();
        if needs_pruning(out.model.config(), target) {
            let report = score(&out.model, inp, spec, s, None)?;
            let d = stage_decision(&out.model, target, &report)?;
            out.model = apply_decision(&out.model, &d)?;
            out.decisions.push(d);
            out.reports.push(without_tensors(report));
        }
        let budget = target.token_budget + if s == last { carry } else { 0 };
        let n_steps = budget / tps;
        let cfg = spec.distill.with_steps(n_steps);
        let mut state = TrainState::new(&cfg, sub_seed(spec.seed, s, 0x7a1));
        let data = TrainData { seqs: inp.train, seq_len: inp.seq_len, teacher: Some(inp.cache) };
        let opts = PhaseOpts {
            kind: LossKind::KdTopk,
            steps: n_steps,
            stop: if s == last { StopRule::Budget } else { target.stop },
            stage: s,
            tokens_before: tokens,
            eval: inp.eval,
            mask: None,
        };
        let phase = match train_phase(&mut out.model, &mut state, data, &cfg, opts) {
            Ok(p) => p,
            Err(e) => {
                out.aborted = Some(format!("stage {s}: {e}"));
                return Ok(out);
            }
        };
        let mut records = phase.records;
        shift_steps(&mut records, steps);
        out.log.extend(records);
        tokens += phase.tokens;
        steps += phase.steps;
        if s != last {
            carry += target.token_budget - phase.tokens;
        }
        let secs = started.elapsed().as_secs_f64();
        out.ledger.record(s, out.model.config(), phase.tokens, false, secs, phase.stopped_early);
    }
    out.final_eval = evaluate(&out.model, &inp.eval[..inp.eval.len().min(spec.distill.eval_seqs.max(1))], inp.seq_len, None)?;
    Ok(out)
}

/// Cubic interpolation from `full` down to `target` over progress `p`.
fn cubic_keep(full: usize, target: usize, p: f64) -> usize {
    let v = target as f64 + (full - target) as f64 * (1.0 - p).powi(3);
    (v.round() as usize).clamp(target, full)
}

/// Top `n` of `scores` restricted to `prev`.
fn keep_within(scores: &[f64], prev: &[usize], n: usize) -> Vec<usize> {
    let sub: Vec<f64> = prev.iter().map(|&i| scores[i]).collect();
    keep_top(&sub, n).into_iter().map(|j| prev[j]).collect()
}

fn tighten(prev: &PruneDecision, report: &SensitivityReport, c: &ModelConfig, keep: (usize, usize, Option<usize>)) -> PruneDecision {
    let (w, kv, nx) = keep;
    let mut d = prev.clone();
    if let Some(en) = &mut d.expert_neurons {
        for (l, per) in en.iter_mut().enumerate() {
            for (e, kept) in per.iter_mut().enumerate() {
                *kept = keep_within(&report.neuron_scores[l][e], kept, w);
            }
        }
    }
    if let Some(f) = &mut d.ffn_neurons {
        for (l, kept) in f.iter_mut().enumerate() {
            *kept = keep_within(&report.ffn_neuron_scores[l], kept, w);
        }
    }
    if let Some(g) = &mut d.groups {
        for (l, kept) in g.iter_mut().enumerate() {
            *kept = keep_within(&report.group_scores[l], kept, kv);
        }
    }
    if let (Some(x), Some(n)) = (&mut d.experts, nx) {
        for (l, kept) in x.iter_mut().enumerate() {
            *kept = keep_within(&report.expert_scores[l], kept, n.max(c.top_k));
        }
    }
    d
}

/// Gradual masking baseline: the full-size model trains under masks that
/// tighten on a cubic schedule and reach the plan's final dims at the end of
/// the masked phase; the masks then become a structural edit and the
/// remaining budget distills the pruned model.
pub fn run_iterative(plan: &StagePlan, sched: &IterativeSchedule, inp: RunInputs<'_>, spec: &RunSpec) -> Result<RunOutcome> {
    spec.distill.validate()?;
    let target = plan.final_stage().clone();
    let total = plan.total_tokens();
    if sched.masked_tokens > total {
        return Err(Error::InvalidPlan(format!("masked phase {} exceeds budget {total}", sched.masked_tokens)));
    }
    let tps = tokens_per_step(&spec.distill, inp.seq_len);
    let masked_steps = sched.masked_tokens / tps;
    if masked_steps == 0 {
        let t = StageTarget { token_budget: total, ..target };
        let mut out = run_oneshot(&t, inp, spec)?;
        out.ledger.baseline = "iterative".into();
        return Ok(out);
    }
    if sched.updates == 0 || sched.updates as u64 > masked_steps {
        return Err(Error::InvalidPlan(format!("{} mask updates over {masked_steps} masked steps", sched.updates)));
    }
    let base = inp.teacher.config().clone();
    if target.width > width_of(&base) || target.n_head_kv > base.n_head_kv {
        return Err(Error::InvalidPlan("iterative target larger than the model".into()));
    }
    let mut out = RunOutcome {
        model: inp.teacher.clone(),
        ledger: BudgetLedger::new("iterative"),
        log: Vec::new(),
        decisions: Vec::new(),
        reports: Vec::new(),
        final_eval: EvalResult::default(),
        conversion_delta: None,
        aborted: None,
    };
    let mut decision = PruneDecision::keep_all(&base);
    if target.n_expert.is_none() {
        decision.experts = None;
    }
    let nx_target = target.n_expert.map(|n| n.min(base.n_expert));
    let cfg = spec.distill.with_steps(masked_steps);
    let mut state = TrainState::new(&cfg, sub_seed(spec.seed, 0, 0x7a1));
    let data = TrainData { seqs: inp.train, seq_len: inp.seq_len, teacher: Some(inp.cache) };
    let started = Instant::now();
    let mut mask = ForwardMask::default();
    let mut done = 0u64;
    let mut tokens = 0u64;
    for k in 1..=sched.updates {
        let until = (k as u64 * masked_steps) / sched.updates as u64;
        let opts = PhaseOpts {
            kind: LossKind::KdTopk,
            steps: until - done,
            stop: StopRule::Budget,
            stage: 0,
            tokens_before: tokens,
            eval: inp.eval,
            mask: Some(&mask),
        };
        let phase = match train_phase(&mut out.model, &mut state, data, &cfg, opts) {
            Ok(p) => p,
            Err(e) => {
                out.aborted = Some(format!("masked phase: {e}"));
                return Ok(out);
            }
        };
        out.log.extend(phase.records);
        done = until;
        tokens += phase.tokens;
        let p = k as f64 / sched.updates as f64;
        let keep = (
            cubic_keep(width_of(&base), target.width, p),
            cubic_keep(base.n_head_kv, target.n_head_kv, p),
            nx_target.map(|n| cubic_keep(base.n_expert, n, p)),
        );
        let report = score(&out.model, inp, spec, k, Some(&mask))?;
        decision = tighten(&decision, &report, &base, keep);
        decision.provenance.report_id = report.id.clone();
        decision.provenance.criterion = "iterative_cubic".into();
        mask = masked_forward_setup(&out.model, &decision)?;
        out.reports.push(without_tensors(report));
    }
    out.ledger.record(0, &base, tokens, true, started.elapsed().as_secs_f64(), false);

    let started = Instant::now();
    let eval_set = &inp.eval[..inp.eval.len().min(spec.distill.eval_seqs.max(1))];
    let masked_eval = evaluate(&out.model, eval_set, inp.seq_len, Some(&mask))?;
    out.model = apply_decision(&out.model, &decision)?;
    out.decisions.push(decision);
    let structural_eval = evaluate(&out.model, eval_set, inp.seq_len, None)?;
    out.conversion_delta = Some((masked_eval.cross_entropy - structural_eval.cross_entropy).abs());

    let rest_steps = (total - tokens) / tps;
    let cfg = spec.distill.with_steps(rest_steps);
    let mut state = TrainState::new(&cfg, sub_seed(spec.seed, 1, 0x7a1));
    let opts = PhaseOpts {
        kind: LossKind::KdTopk,
        steps: rest_steps,
        stop: StopRule::Budget,
        stage: 1,
        tokens_before: tokens,
        eval: inp.eval,
        mask: None,
    };
    let phase = match train_phase(&mut out.model, &mut state, data, &cfg, opts) {
        Ok(p) => p,
        Err(e) => {
            out.aborted = Some(format!("final stage: {e}"));
            return Ok(out);
        }
    };
    let mut records = phase.records;
    shift_steps(&mut records, masked_steps);
    out.log.extend(records);
    out.ledger.record(1, out.model.config(), phase.tokens, false, started.elapsed().as_secs_f64(), false);
    out.final_eval = evaluate(&out.model, eval_set, inp.seq_len, None)?;
    Ok(out)
}

/// Train a model from scratch on next-token prediction.
pub fn train_teacher(
    config: ModelConfig,
    seed: u64,
    train: &[Vec<u32>],
    eval: &[Vec<u32>],
    seq_len: usize,
    cfg: &DistillConfig,
) -> Result<(Model, Vec<MetricRecord>)> {
    let mut model = Model::init(config, seed)?;
    let mut state = TrainState::new(cfg, seed);
    let data = TrainData { seqs: train, seq_len, teacher: None };
    let opts = PhaseOpts {
        kind: LossKind::Clm,
        steps: cfg.total_steps,
        stop: StopRule::Budget,
        stage: 0,
        tokens_before: 0,
        eval,
        mask: None,
    };
    let phase = train_phase(&mut model, &mut state, data, cfg, opts)?;
    Ok((model, phase.records))
}

pub fn write_metric_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}
