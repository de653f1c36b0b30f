use proptest::prelude::*;

use super::*;
use crate::distill::{DistillConfig, TeacherCache};
use crate::eval::{gen_synthetic_corpus, TaskKind, TaskSpec};
use crate::model::{names, ArchKind, Model};

fn full_scale(d_expert: usize, heads: (usize, usize)) -> ModelConfig {
    ModelConfig {
        d_model: 4096,
        n_head_q: heads.0,
        n_head_kv: heads.1,
        d_head: 128,
        d_expert,
        n_layer: 32,
        n_expert: 16,
        top_k: 2,
        vocab_size: 32064,
        max_seq_len: 4096,
        arch_kind: ArchKind::Moe,
        d_ffn: 0,
    }
}

fn widths(p: &StagePlan) -> Vec<usize> {
    p.stages.iter().map(|s| s.width).collect()
}

fn heads(p: &StagePlan) -> Vec<(usize, usize)> {
    p.stages.iter().map(|s| (s.n_head_q, s.n_head_kv)).collect()
}

#[test]
fn single_stage_plan_is_the_target() {
    let mut c = ModelConfig::tiny_moe();
    c.d_expert = 64;
    let p = geometric_plan(0.25, 1, &c, &PlanOptions { total_tokens: 1000, ..Default::default() }).unwrap();
    assert_eq!(widths(&p), vec![16]);
    assert_eq!(p.stages[0].token_budget, 1000);
    assert_eq!(p.stages[0].stop, StopRule::Budget);
}

#[test]
fn two_stage_quarter_plan() {
    let mut c = ModelConfig::tiny_moe();
    c.d_expert = 64;
    let p = geometric_plan(0.25, 2, &c, &PlanOptions { total_tokens: 1000, ..Default::default() }).unwrap();
    assert_eq!(widths(&p), vec![32, 16]);
    assert_eq!(p.stages.iter().map(|s| s.token_budget).collect::<Vec<_>>(), vec![350, 650]);
    assert_eq!(p.stages[0].stop, StopRule::Plateau);
    assert_eq!(p.total_tokens(), 1000);
}

#[test]
fn full_scale_mini_schedule() {
    let opts = PlanOptions { overrides: vec![StageOverride { width: Some(2240), heads: None }], ..Default::default() };
    let p = geometric_plan(0.15, 2, &full_scale(6400, (32, 8)), &opts).unwrap();
    assert_eq!(widths(&p), vec![2240, 960]);
    assert_eq!(heads(&p), vec![(32, 8), (32, 8)]);
}

#[test]
fn full_scale_tiny_schedule() {
    let opts = PlanOptions {
        kv_alpha: Some(0.5),
        overrides: vec![
            StageOverride { width: Some(2624), heads: Some((24, 6)) },
            StageOverride { width: Some(1024), heads: Some((20, 5)) },
        ],
        ..Default::default()
    };
    let p = geometric_plan(0.07, 3, &full_scale(6400, (32, 8)), &opts).unwrap();
    assert_eq!(widths(&p), vec![2624, 1024, 448]);
    assert_eq!(heads(&p), vec![(24, 6), (20, 5), (16, 4)]);

    // Without overrides the geometric heads already match; widths stay
    // within one granule.
    let plain = geometric_plan(0.07, 3, &full_scale(6400, (32, 8)), &PlanOptions { kv_alpha: Some(0.5), ..Default::default() }).unwrap();
    assert_eq!(heads(&plain), heads(&p));
    assert!(plain.stages[0].width.abs_diff(2624) <= 16);
    assert!(plain.stages[1].width.abs_diff(1024) <= 64);
}

#[test]
fn overrides_must_stay_monotone_and_exact() {
    let base = full_scale(6400, (32, 8));
    let up = PlanOptions { overrides: vec![StageOverride { width: Some(7000), heads: None }], ..Default::default() };
    assert!(matches!(geometric_plan(0.15, 2, &base, &up), Err(Error::InvalidPlan(_))));
    let bad_final = PlanOptions { overrides: vec![StageOverride::default(), StageOverride { width: Some(1000), heads: None }], ..Default::default() };
    assert!(matches!(geometric_plan(0.15, 2, &base, &bad_final), Err(Error::InvalidPlan(_))));
    let under = PlanOptions { overrides: vec![StageOverride { width: Some(512), heads: None }], ..Default::default() };
    assert!(geometric_plan(0.15, 2, &base, &under).is_err());
    let broken_group = PlanOptions { overrides: vec![StageOverride { width: None, heads: Some((20, 6)) }], ..Default::default() };
    assert!(geometric_plan(0.15, 2, &base, &broken_group).is_err());
    assert!(geometric_plan(1.0, 2, &base, &PlanOptions::default()).is_err());
    assert!(geometric_plan(0.5, 0, &base, &PlanOptions::default()).is_err());
}

#[test]
fn drop_plan_checks_top_k() {
    let c = ModelConfig::desk_teacher(32, 64);
    let p = drop_plan(&c, 4, 100).unwrap();
    assert_eq!(p.target_config(&c).n_expert, 4);
    assert_eq!(p.target_config(&c).d_expert, 128);
    assert!(drop_plan(&c, 1, 100).is_err());
}

#[test]
fn flops_are_linear_in_tokens() {
    let c = ModelConfig::desk_teacher(32, 64);
    assert_eq!(flops_account(&c, 2000), 2 * flops_account(&c, 1000));
    assert_eq!(flops_account(&c, 0), 0);
}

#[test]
fn full_scale_active_ratio() {
    let teacher = full_scale(6400, (32, 8));
    let mini = full_scale(960, (32, 8));
    let (a, b) = (teacher.active_param_count(), mini.active_param_count());
    assert_eq!((a as f64 / 1e8).round() / 10.0, 6.6);
    assert_eq!((b as f64 / 1e8).round() / 10.0, 2.4);
    let tokens = 1_000_000;
    let (fa, fb) = (flops_account(&teacher, tokens), flops_account(&mini, tokens));
    assert_eq!(fa * b as u128, fb * a as u128);
    assert!((fa as f64 / fb as f64 - 2.75).abs() < 0.1);
}

/// Active parameters by walking the tensors a token touches.
fn touched_params(m: &Model) -> usize {
    let c = m.config();
    let size = |n: &str| m.param(n).unwrap().numel();
    let mut total = size(names::EMBED) + size(names::UNEMBED);
    for l in 0..c.n_layer {
        total += size(&names::wq(l)) + size(&names::wk(l)) + size(&names::wv(l)) + size(&names::wo(l));
        total += size(&names::router(l));
        // Every expert has the same shape, so any top_k of them cost the same.
        for e in 0..c.top_k {
            total += (1..=3).map(|w| size(&names::expert(l, e, w))).sum::<usize>();
        }
    }
    total
}

#[test]
fn toy_flops_match_per_matrix_count() {
    for cfg in [ModelConfig::tiny_moe(), ModelConfig::desk_teacher(32, 64)] {
        let m = Model::init(cfg.clone(), 0).unwrap();
        assert_eq!(flops_account(&cfg, 10), 6 * 10 * touched_params(&m) as u128);
    }
}

#[test]
fn ledger_totals_are_stage_sums() {
    let c = ModelConfig::tiny_moe();
    let mut small = c.clone();
    small.d_expert = 4;
    let mut l = BudgetLedger::new("multistage");
    l.record(0, &c, 300, false, 0.1, true);
    l.record(1, &small, 700, false, 0.2, false);
    assert_eq!(l.total_tokens(), 1000);
    assert_eq!(l.total_flops(), flops_account(&c, 300) + flops_account(&small, 700));
    assert_eq!(l.init_flops(1), flops_account(&c, 300));
    assert_eq!(l.init_tokens(1), 300);
}

proptest! {
    #[test]
    fn plans_are_monotone_and_near_geometric(alpha in 0.02f64..0.98, t in 1usize..6, dim in 16usize..4096) {
        let mut c = ModelConfig::tiny_moe();
        c.d_expert = dim;
        let p = geometric_plan(alpha, t, &c, &PlanOptions { total_tokens: 10_000, ..Default::default() }).unwrap();
        prop_assert_eq!(p.stages.len(), t);
        prop_assert_eq!(p.final_stage().width, crate::pruning::keep_count(dim, alpha));
        prop_assert_eq!(p.total_tokens(), 10_000);
        let mut prev = dim;
        for (s, st) in p.stages.iter().enumerate() {
            prop_assert!(st.width <= prev && st.width >= 1);
            let ideal = dim as f64 * alpha.powf((s + 1) as f64 / t as f64);
            prop_assert!((st.width as f64 - ideal).abs() <= GRANULE as f64, "stage {} width {} ideal {}", s, st.width, ideal);
            prev = st.width;
        }
    }
}

struct Fixture {
    teacher: Model,
    cache: TeacherCache,
    train: Vec<Vec<u32>>,
    eval: Vec<Vec<u32>>,
}

const L: usize = 8;

fn fixture() -> Fixture {
    let spec = TaskSpec { kind: TaskKind::MarkovChars, vocab_size: 32, seq_len: L, train_tokens: 2048, eval_tokens: 256, seed: 4 };
    let corpus = gen_synthetic_corpus(&spec).unwrap();
    let cfg = DistillConfig { lr_peak: 3e-3, warmup_steps: 2, total_steps: 20, batch_tokens: 64, eval_every: 10, eval_seqs: 8, ..Default::default() };
    let (teacher, _) = train_teacher(ModelConfig::tiny_moe(), 1, &corpus.train, &corpus.eval, L, &cfg).unwrap();
    let cache = TeacherCache::build(&teacher, &corpus.train, L, 8).unwrap();
    Fixture { teacher, cache, train: corpus.train, eval: corpus.eval }
}

impl Fixture {
    fn inputs(&self) -> RunInputs<'_> {
        RunInputs { teacher: &self.teacher, cache: &self.cache, train: &self.train, eval: &self.eval, seq_len: L }
    }
}

fn spec(seed: u64) -> RunSpec {
    RunSpec {
        seed,
        distill: DistillConfig { lr_peak: 1e-3, warmup_steps: 1, batch_tokens: 64, eval_every: 3, eval_seqs: 8, ..Default::default() },
        calib_count: 16,
        calib_micro_batch: 8,
        ..Default::default()
    }
}

fn small_plan(t: usize, total: u64) -> StagePlan {
    let opts = PlanOptions { granule: 4, kv_alpha: Some(0.5), total_tokens: total, intermediate_stop: StopRule::Budget, ..Default::default() };
    geometric_plan(0.25, t, &ModelConfig::tiny_moe(), &opts).unwrap()
}

fn same_weights(a: &Model, b: &Model) -> bool {
    a.config() == b.config() && a.params().iter().all(|(n, e)| b.param(n).is_ok_and(|t| t.to_bits() == e.tensor.to_bits()))
}

#[test]
fn runs_conserve_tokens_and_reach_target() {
    let f = fixture();
    let plan = small_plan(2, 64 * 20);
    assert_eq!(widths(&plan), vec![8, 4]);
    let out = run_multistage(&plan, f.inputs(), &spec(0)).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.ledger.total_tokens(), 64 * 20);
    let stage_sum: u128 = out.ledger.stages.iter().map(|s| flops_account(&plan.config_after(f.teacher.config(), s.stage), s.tokens)).sum();
    assert_eq!(out.ledger.total_flops(), stage_sum);
    assert_eq!(out.model.config(), &plan.target_config(f.teacher.config()));
    assert_eq!(out.decisions.len(), 2);
    assert_eq!((out.model.config().d_expert, out.model.config().n_head_kv), (4, 1));
    let tokens: Vec<u64> = out.log.iter().map(|r| r.tokens).collect();
    assert!(tokens.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*tokens.last().unwrap(), 64 * 20);
    assert!(out.final_eval.cross_entropy.is_finite());
}

#[test]
fn single_stage_plan_equals_oneshot() {
    let f = fixture();
    let plan = small_plan(1, 64 * 12);
    let a = run_multistage(&plan, f.inputs(), &spec(3)).unwrap();
    let b = run_oneshot(plan.final_stage(), f.inputs(), &spec(3)).unwrap();
    assert_eq!(a.log, b.log);
    assert!(same_weights(&a.model, &b.model));
    assert_eq!(b.decisions.len(), 1);
    assert_eq!(b.ledger.stages.len(), 1);
    assert_eq!(a.ledger.total_tokens(), b.ledger.total_tokens());
}

#[test]
fn runs_are_reproducible() {
    let f = fixture();
    let plan = small_plan(2, 64 * 10);
    let a = run_multistage(&plan, f.inputs(), &spec(5)).unwrap();
    let b = run_multistage(&plan, f.inputs(), &spec(5)).unwrap();
    assert_eq!(a.log, b.log);
    assert!(same_weights(&a.model, &b.model));
    let c = run_multistage(&plan, f.inputs(), &spec(6)).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn early_stopped_tokens_roll_into_final_stage() {
    let f = fixture();
    let opts = PlanOptions { granule: 4, total_tokens: 64 * 40, init_share: 0.5, ..Default::default() };
    let plan = geometric_plan(0.25, 2, f.teacher.config(), &opts).unwrap();
    let mut s = spec(0);
    s.distill.plateau_window = 1;
    s.distill.plateau_eps = 10.0;
    let out = run_multistage(&plan, f.inputs(), &s).unwrap();
    assert!(out.ledger.stages[0].stopped_early);
    assert!(out.ledger.stages[0].tokens < plan.stages[0].token_budget);
    assert_eq!(out.ledger.total_tokens(), 64 * 40);
}

#[test]
fn iterative_pays_full_size_while_masked() {
    let f = fixture();
    let plan = small_plan(2, 64 * 20);
    let init = plan.stages[0].token_budget;
    let sched = IterativeSchedule { masked_tokens: init, updates: 3 };
    let out = run_iterative(&plan, &sched, f.inputs(), &spec(1)).unwrap();
    assert!(out.aborted.is_none());
    let masked = &out.ledger.stages[0];
    assert!(masked.masked);
    assert_eq!(masked.active_params, f.teacher.config().active_param_count());
    assert_eq!(out.ledger.total_tokens(), 64 * 20);
    assert_eq!(out.model.config(), &plan.target_config(f.teacher.config()));
    assert!(out.conversion_delta.unwrap() < 1e-6, "{:?}", out.conversion_delta);
    assert_eq!(out.reports.len(), 3);
    assert_eq!(out.ledger.baseline, "iterative");

    let ms = run_multistage(&plan, f.inputs(), &spec(1)).unwrap();
    let (a_full, a_1) = (f.teacher.config().active_param_count() as u128, plan.config_after(f.teacher.config(), 0).active_param_count() as u128);
    let (t_iter, t_ms) = (out.ledger.init_tokens(1) as u128, ms.ledger.init_tokens(1) as u128);
    assert_eq!(out.ledger.init_flops(1) * a_1 * t_ms, ms.ledger.init_flops(1) * a_full * t_iter);
}

#[test]
fn zero_length_masked_phase_is_oneshot() {
    let f = fixture();
    let plan = small_plan(2, 64 * 10);
    let it = run_iterative(&plan, &IterativeSchedule { masked_tokens: 0, updates: 4 }, f.inputs(), &spec(2)).unwrap();
    let target = StageTarget { token_budget: plan.total_tokens(), ..plan.final_stage().clone() };
    let os = run_oneshot(&target, f.inputs(), &spec(2)).unwrap();
    assert_eq!(it.log, os.log);
    assert!(same_weights(&it.model, &os.model));
}

#[test]
fn iterative_schedule_errors() {
    let f = fixture();
    let plan = small_plan(2, 64 * 10);
    let too_long = IterativeSchedule { masked_tokens: 64 * 11, updates: 2 };
    assert!(matches!(run_iterative(&plan, &too_long, f.inputs(), &spec(0)), Err(Error::InvalidPlan(_))));
    let no_updates = IterativeSchedule { masked_tokens: 64 * 4, updates: 0 };
    assert!(matches!(run_iterative(&plan, &no_updates, f.inputs(), &spec(0)), Err(Error::InvalidPlan(_))));
}

#[test]
fn drop_run_removes_experts() {
    let f = fixture();
    let plan = drop_plan(f.teacher.config(), 2, 64 * 6).unwrap();
    let out = run_oneshot(plan.final_stage(), f.inputs(), &spec(0)).unwrap();
    assert_eq!(out.model.config().n_expert, 2);
    assert_eq!(out.decisions[0].experts.as_ref().unwrap().len(), 2);
}

#[test]
fn metric_log_round_trips() {
    let f = fixture();
    let out = run_oneshot(small_plan(1, 64 * 6).final_stage(), f.inputs(), &spec(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.csv");
    write_metric_log(&p, &out.log).unwrap();
    assert_eq!(read_metric_log(&p).unwrap(), out.log);
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("step,tokens,train_loss,eval_loss,eval_acc,aux,lr,stage\n"));
}
