//! Run configuration and the end-to-end pipeline behind the command line.
//!
//! A run directory holds `run_config.json`, the teacher checkpoint, metric
//! log and top-k cache, and one sub-directory per arm and seed with the
//! metric log, metric rows, decisions, manifest and final checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{teacher_fingerprint, train_phase, DistillConfig, LossKind, MetricRecord, PhaseOpts, StopRule, TeacherCache, TrainData, TrainState};
use crate::error::{Error, Result};
use crate::eval::{gen_synthetic_corpus, read_metric_rows, Corpus, MetricRow, RunRecord, TaskKind, TaskSpec};
use crate::model::{Model, ModelConfig};
use crate::persist::{load_checkpoint, save_checkpoint, Checkpoint, RunLock};
use crate::pruning::{
    aggregate, apply_decision, keep_count, param_sensitivity, CalibrationSet, ExpertCriterion, PruneDecision, SensitivityReport,
};
use crate::schedule::{
    drop_plan, geometric_plan, read_metric_log, run_iterative, run_multistage, run_oneshot, train_teacher, write_metric_log,
    BudgetLedger, IterativeSchedule, PlanOptions, RunInputs, RunManifest, RunOutcome, RunSpec, StageOverride, StagePlan, StageTarget,
    GRANULE, INIT_SHARE,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_CACHE: &str = "teacher.cache";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROWS_FILE: &str = "rows.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DECISIONS_FILE: &str = "decisions.json";
pub const MODEL_CKPT: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Multistage,
    Oneshot,
    Iterative,
    DropExpert,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Multistage => "multistage",
            Arm::Oneshot => "oneshot",
            Arm::Iterative => "iterative",
            Arm::DropExpert => "drop-expert",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multistage" => Ok(Arm::Multistage),
            "oneshot" => Ok(Arm::Oneshot),
            "iterative" => Ok(Arm::Iterative),
            "drop-expert" => Ok(Arm::DropExpert),
            _ => Err(Error::InvalidConfig(format!("unknown arm {s}"))),
        }
    }
}

fn default_granule() -> usize {
    GRANULE
}

fn default_init_share() -> f64 {
    INIT_SHARE
}

fn default_stop() -> StopRule {
    StopRule::Plateau
}

fn default_updates() -> usize {
    4
}

/// Compression target and schedule shape shared by every arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Final keep ratio of the expert (or dense FFN) width.
    pub alpha: f64,
    pub stages: usize,
    #[serde(default)]
    pub kv_alpha: Option<f64>,
    #[serde(default)]
    pub overrides: Vec<StageOverride>,
    #[serde(default = "default_granule")]
    pub granule: usize,
    #[serde(default = "default_init_share")]
    pub init_share: f64,
    #[serde(default = "default_stop")]
    pub intermediate_stop: StopRule,
    /// Experts kept per layer by the drop-expert arm.
    #[serde(default)]
    pub drop_to: Option<usize>,
    /// Mask tightenings of the iterative arm.
    #[serde(default = "default_updates")]
    pub iterative_updates: usize,
}

fn default_score_loss() -> LossKind {
    LossKind::KdTopk
}

fn default_criterion() -> ExpertCriterion {
    ExpertCriterion::KlSum
}

/// Everything that determines a run, given the code version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub teacher: ModelConfig,
    pub teacher_train: DistillConfig,
    #[serde(default)]
    pub teacher_seed: u64,
    pub distill: DistillConfig,
    pub plan: PlanConfig,
    pub total_tokens: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_score_loss")]
    pub score_loss: LossKind,
    #[serde(default = "default_criterion")]
    pub expert_criterion: ExpertCriterion,
    pub calib_count: usize,
    pub calib_micro_batch: usize,
    pub out_dir: PathBuf,
    /// Reuse an existing teacher instead of training one.
    #[serde(default)]
    pub teacher_ckpt: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale comparison: 64-wide teacher on a 32-symbol Markov task.
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        let seq_len = 64;
        Self {
            task: TaskSpec { kind: TaskKind::MarkovChars, vocab_size: 32, seq_len, train_tokens: 1 << 19, eval_tokens: 16384, seed: 0 },
            teacher: ModelConfig::desk_teacher(32, seq_len),
            teacher_train: DistillConfig { lr_peak: 3e-3, warmup_steps: 20, total_steps: 1000, eval_every: 100, eval_seqs: 32, ..Default::default() },
            teacher_seed: 0,
            distill: DistillConfig { warmup_steps: 10, eval_every: 25, ..Default::default() },
            plan: PlanConfig {
                alpha: 0.15,
                stages: 2,
                kv_alpha: None,
                overrides: Vec::new(),
                granule: GRANULE,
                init_share: INIT_SHARE,
                intermediate_stop: StopRule::Plateau,
                drop_to: Some(4),
                iterative_updates: 4,
            },
            total_tokens: 150_000,
            seeds: vec![0, 1, 2, 3, 4],
            score_loss: LossKind::KdTopk,
            expert_criterion: ExpertCriterion::KlSum,
            calib_count: 64,
            calib_micro_batch: 16,
            out_dir: out_dir.into(),
            teacher_ckpt: None,
        }
    }

    /// Seconds-long run on the tiny model, for smoke tests.
    pub fn smoke(out_dir: impl Into<PathBuf>) -> Self {
        let seq_len = 8;
        Self {
            task: TaskSpec { kind: TaskKind::MarkovChars, vocab_size: 32, seq_len, train_tokens: 2048, eval_tokens: 256, seed: 0 },
            teacher: ModelConfig::tiny_moe(),
            teacher_train: DistillConfig { lr_peak: 3e-3, warmup_steps: 2, total_steps: 20, batch_tokens: 64, eval_every: 10, eval_seqs: 8, ..Default::default() },
            teacher_seed: 0,
            distill: DistillConfig { lr_peak: 1e-3, warmup_steps: 1, batch_tokens: 64, eval_every: 4, eval_seqs: 8, ..Default::default() },
            plan: PlanConfig {
                alpha: 0.25,
                stages: 2,
                kv_alpha: Some(0.5),
                overrides: Vec::new(),
                granule: 4,
                init_share: INIT_SHARE,
                intermediate_stop: StopRule::Budget,
                drop_to: Some(2),
                iterative_updates: 2,
            },
            total_tokens: 64 * 12,
            seeds: vec![0],
            score_loss: LossKind::KdTopk,
            expert_criterion: ExpertCriterion::KlSum,
            calib_count: 16,
            calib_micro_batch: 8,
            out_dir: out_dir.into(),
            teacher_ckpt: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        if self.teacher.vocab_size != self.task.vocab_size || self.teacher.max_seq_len < self.task.seq_len {
            return Err(Error::InvalidConfig("teacher vocab or context does not fit the task".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<Corpus> {
        gen_synthetic_corpus(&self.task)
    }

    pub fn run_spec(&self, seed: u64) -> RunSpec {
        RunSpec {
            seed,
            distill: self.distill.clone(),
            score_loss: self.score_loss,
            expert_criterion: self.expert_criterion,
            calib_count: self.calib_count,
            calib_micro_batch: self.calib_micro_batch,
        }
    }

    pub fn geometric(&self, base: &ModelConfig) -> Result<StagePlan> {
        let p = &self.plan;
        let opts = PlanOptions {
            granule: p.granule,
            kv_alpha: p.kv_alpha,
            overrides: p.overrides.clone(),
            total_tokens: self.total_tokens,
            init_share: p.init_share,
            intermediate_stop: p.intermediate_stop,
        };
        geometric_plan(p.alpha, p.stages, base, &opts)
    }

    /// The stage plan an arm follows from `base`.
    pub fn plan_for(&self, arm: Arm, base: &ModelConfig) -> Result<StagePlan> {
        match arm {
            Arm::Multistage | Arm::Iterative => self.geometric(base),
            Arm::Oneshot => {
                let mut plan = self.geometric(base)?;
                let target = StageTarget { token_budget: self.total_tokens, stop: StopRule::Budget, ..plan.final_stage().clone() };
                plan.t = 1;
                plan.stages = vec![target];
                Ok(plan)
            }
            Arm::DropExpert => {
                let n = self.plan.drop_to.ok_or_else(|| Error::InvalidPlan("drop-expert arm needs plan.drop_to".into()))?;
                drop_plan(base, n, self.total_tokens)
            }
        }
    }
}

/// Run one arm for one seed on prepared inputs.
pub fn run_arm(cfg: &RunConfig, arm: Arm, inputs: RunInputs<'_>, seed: u64) -> Result<(StagePlan, RunOutcome)> {
    let plan = cfg.plan_for(arm, inputs.teacher.config())?;
    let spec = cfg.run_spec(seed);
    let out = match arm {
        Arm::Multistage => run_multistage(&plan, inputs, &spec)?,
        Arm::Oneshot | Arm::DropExpert => {
            let mut o = run_oneshot(plan.final_stage(), inputs, &spec)?;
            o.ledger.baseline = arm.name().into();
            o
        }
        Arm::Iterative => {
            let masked_tokens = plan.stages[..plan.stages.len() - 1].iter().map(|s| s.token_budget).sum();
            let sched = IterativeSchedule { masked_tokens, updates: cfg.plan.iterative_updates };
            run_iterative(&plan, &sched, inputs, &spec)?
        }
    };
    Ok((plan, out))
}

/// Metric rows of a run: one per logged evaluation.
pub fn metric_rows(run_id: &str, log: &[MetricRecord], ledger: &BudgetLedger) -> Vec<MetricRow> {
    log.iter()
        .map(|r| {
            // Rows are stamped with the cost of the phase that produced them.
            let active = ledger
                .stages
                .iter()
                .rev()
                .find(|s| s.stage == r.stage)
                .or(ledger.stages.last())
                .map_or(0, |s| s.active_params);
            MetricRow {
                run_id: run_id.to_string(),
                stage: r.stage,
                tokens: r.tokens,
                eval_ce: r.eval_loss,
                eval_acc: r.eval_acc,
                aux: r.aux,
                active_params: active as u64,
            }
        })
        .collect()
}

/// Directory name of an arm's run for a seed.
pub fn run_id(arm: Arm, seed: u64) -> String {
    format!("{}-seed{seed}", arm.name())
}

/// Teacher for a run directory: explicit checkpoint, previously trained, or
/// freshly trained and saved.
pub fn prepare_teacher(cfg: &RunConfig, corpus: &Corpus) -> Result<Model> {
    if let Some(p) = &cfg.teacher_ckpt {
        return Ok(load_checkpoint(p)?.model);
    }
    let path = cfg.out_dir.join(TEACHER_CKPT);
    if path.exists() {
        let m = load_checkpoint(&path)?.model;
        if m.config() == &cfg.teacher {
            return Ok(m);
        }
    }
    let (m, log) = train_teacher(cfg.teacher.clone(), cfg.teacher_seed, &corpus.train, &corpus.eval, corpus.seq_len(), &cfg.teacher_train)?;
    save_checkpoint(&Checkpoint::new(m.clone()), &path)?;
    write_metric_log(&cfg.out_dir.join(TEACHER_METRICS), &log)?;
    Ok(m)
}

/// Top-k cache over the training split, reused when it matches the teacher.
pub fn prepare_cache(cfg: &RunConfig, teacher: &Model, corpus: &Corpus) -> Result<TeacherCache> {
    let path = cfg.out_dir.join(TEACHER_CACHE);
    let want = corpus.train.len() * corpus.seq_len();
    if path.exists() {
        let c = TeacherCache::load(&path)?;
        if c.fingerprint == teacher_fingerprint(teacher) && c.k == cfg.distill.topk_teacher && c.len() == want {
            return Ok(c);
        }
    }
    let c = TeacherCache::build(teacher, &corpus.train, corpus.seq_len(), cfg.distill.topk_teacher)?;
    c.save(&path)?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub run_id: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub final_eval_ce: f64,
    pub aborted: Option<String>,
}

#[derive(Serialize)]
struct DecisionLog<'a> {
    decisions: &'a [PruneDecision],
    reports: &'a [SensitivityReport],
    conversion_delta: Option<f64>,
    aborted: &'a Option<String>,
}

/// Train or reuse the teacher, build the cache and run `arm` for every seed,
/// writing all artifacts under `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig, arm: Arm) -> Result<Vec<PipelineRun>> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(RUN_CONFIG_FILE))?;
    let corpus = cfg.corpus()?;
    let teacher = prepare_teacher(cfg, &corpus)?;
    let cache = prepare_cache(cfg, &teacher, &corpus)?;
    let inputs = RunInputs { teacher: &teacher, cache: &cache, train: &corpus.train, eval: &corpus.eval, seq_len: corpus.seq_len() };

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let id = run_id(arm, seed);
        let dir = cfg.out_dir.join(&id);
        fs::create_dir_all(&dir)?;
        let (plan, out) = run_arm(cfg, arm, inputs, seed)?;
        write_metric_log(&dir.join(METRICS_FILE), &out.log)?;
        crate::eval::write_metric_rows(&metric_rows(&id, &out.log, &out.ledger), &dir.join(ROWS_FILE))?;
        let log = DecisionLog { decisions: &out.decisions, reports: &out.reports, conversion_delta: out.conversion_delta, aborted: &out.aborted };
        fs::write(dir.join(DECISIONS_FILE), serde_json::to_string_pretty(&log)?)?;
        let mut ckpt = Checkpoint::new(out.model.clone());
        ckpt.decision = out.decisions.last().cloned();
        ckpt.report = out.reports.last().cloned();
        save_checkpoint(&ckpt, &dir.join(MODEL_CKPT))?;
        let artifacts = [METRICS_FILE, ROWS_FILE, DECISIONS_FILE, MODEL_CKPT]
            .iter()
            .map(|f| (f.to_string(), dir.join(f).display().to_string()))
            .collect();
        let manifest = RunManifest { arm: arm.name().into(), plan, seed, total_tokens: out.ledger.total_tokens(), artifacts, ledger: out.ledger.clone() };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        runs.push(PipelineRun { run_id: id, dir, manifest, final_eval_ce: out.final_eval.cross_entropy, aborted: out.aborted });
    }
    Ok(runs)
}

/// Every finished run below `dir` (sub-directories with a manifest and rows),
/// sorted by run id.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if !(p.join(MANIFEST_FILE).is_file() && p.join(ROWS_FILE).is_file()) {
            continue;
        }
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(p.join(MANIFEST_FILE))?)?;
        let rows = read_metric_rows(&p.join(ROWS_FILE))?;
        let run_id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push(RunRecord { run_id, rows, flops: manifest.ledger.total_flops() });
    }
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(runs)
}

/// Read a run's training log back.
pub fn read_run_log(dir: &Path) -> Result<Vec<MetricRecord>> {
    read_metric_log(&dir.join(METRICS_FILE))
}

/// Axis a standalone prune touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    Slim,
    Gqa,
    DropExpert,
    DenseFfn,
}

/// Sensitivity scores of `model` on a calibration sample of `train`.
pub fn score_model(
    model: &Model,
    cache: Option<&TeacherCache>,
    train: &[Vec<u32>],
    seq_len: usize,
    cfg: &RunConfig,
    loss: LossKind,
    seed: u64,
) -> Result<SensitivityReport> {
    let calib = CalibrationSet::sample(train.len(), cfg.calib_count, seq_len, cfg.calib_micro_batch, seed)?;
    let r = param_sensitivity(model, cache, train, &calib, loss, cfg.distill.renormalize)?;
    aggregate(r, model.config(), cfg.expert_criterion)
}

/// Decision keeping `ratio` of the units along `mode`'s axis, and the
/// pruned model.
pub fn prune_model(model: &Model, report: &SensitivityReport, mode: PruneMode, ratio: f64) -> Result<(Model, PruneDecision)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("ratio {ratio} must lie in (0, 1]")));
    }
    let c = model.config();
    let need_moe = |moe: bool| {
        if c.is_moe() == moe {
            Ok(())
        } else {
            Err(Error::WrongArch { expected: if moe { "moe" } else { "dense_ffn" }.into(), found: c.arch_kind.to_string() })
        }
    };
    let mut d = match mode {
        PruneMode::Slim => {
            need_moe(true)?;
            PruneDecision::slim_experts(report, keep_count(c.d_expert, ratio))?
        }
        PruneMode::DenseFfn => {
            need_moe(false)?;
            PruneDecision::slim_ffn(report, keep_count(c.d_ffn, ratio))?
        }
        PruneMode::Gqa => PruneDecision::prune_groups(report, keep_count(c.n_head_kv, ratio))?,
        PruneMode::DropExpert => {
            need_moe(true)?;
            PruneDecision::drop_experts(report, keep_count(c.n_expert, ratio).max(c.top_k))?
        }
    };
    d.provenance.ratio = ratio;
    let pruned = apply_decision(model, &d)?;
    Ok((pruned, d))
}

/// Distill `model` toward the cached teacher for `tokens` tokens.
pub fn distill_model(
    model: &mut Model,
    cache: &TeacherCache,
    corpus: &Corpus,
    cfg: &DistillConfig,
    tokens: u64,
    seed: u64,
) -> Result<(TrainState, Vec<MetricRecord>)> {
    let l = corpus.seq_len();
    if cache.len() != corpus.train.len() * l {
        return Err(Error::InvalidConfig(format!("cache holds {} positions, corpus has {}", cache.len(), corpus.train.len() * l)));
    }
    let per_step = ((cfg.batch_tokens / l).max(1) * l) as u64;
    let steps = (tokens / per_step).max(1);
    let cfg = cfg.with_steps(steps);
    let mut state = TrainState::new(&cfg, seed);
    let opts = PhaseOpts { kind: LossKind::KdTopk, steps, stop: StopRule::Budget, stage: 0, tokens_before: 0, eval: &corpus.eval, mask: None };
    let out = train_phase(model, &mut state, TrainData { seqs: &corpus.train, seq_len: l, teacher: Some(cache) }, &cfg, opts)?;
    Ok((state, out.records))
}
