//! Distillation and language-modeling objectives with the training loop.

mod cache;
mod optim;

pub use cache::{teacher_fingerprint, TeacherCache, CACHE_MAGIC, CACHE_VERSION};
pub use optim::{cosine_lr, plateau_early_stop, AdamW};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, flatten_batch};
use crate::model::{ForwardMask, Model};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Top-k teacher distillation.
    KdTopk,
    /// Next-token cross-entropy on the data.
    Clm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub topk_teacher: usize,
    pub aux_coef: f64,
    pub lr_peak: f64,
    /// Final learning rate as a fraction of `lr_peak`.
    pub lr_floor_ratio: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_tokens: usize,
    pub plateau_window: usize,
    pub plateau_eps: f64,
    /// Evaluate every this many steps (and always at the last step).
    pub eval_every: u64,
    /// Held-out sequences used for in-training evaluation.
    pub eval_seqs: usize,
    /// Renormalize the teacher's top-k probabilities before the KL.
    pub renormalize: bool,
    pub grad_clip: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            topk_teacher: 8,
            aux_coef: 0.01,
            lr_peak: 1e-4,
            lr_floor_ratio: 0.1,
            weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 1000,
            batch_tokens: 1024,
            plateau_window: 3,
            plateau_eps: 0.01,
            eval_every: 50,
            eval_seqs: 64,
            renormalize: true,
            grad_clip: Some(1.0),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk_teacher == 0 {
            return Err(Error::InvalidConfig("topk_teacher must be >= 1".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_tokens == 0 || self.eval_every == 0 || self.plateau_window == 0 {
            return Err(Error::InvalidConfig("batch_tokens, eval_every and plateau_window must be >= 1".into()));
        }
        if self.lr_peak.is_nan() || self.lr_peak <= 0.0 || !(0.0..=1.0).contains(&self.lr_floor_ratio) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate or decay out of range".into()));
        }
        Ok(())
    }

    /// Copy with `total_steps` set and warmup shortened if needed.
    pub fn with_steps(&self, total_steps: u64) -> Self {
        let mut c = self.clone();
        c.total_steps = total_steps.max(1);
        c.warmup_steps = c.warmup_steps.min(c.total_steps - 1);
        c
    }
}

/// Teacher targets for a batch: `k` indices and probabilities per token.
#[derive(Clone, Debug, PartialEq)]
pub struct KdTargets {
    pub k: usize,
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Mean over tokens of `KL(p_teacher || p_student)` on the teacher's top-k
/// support, using the student's full log-softmax.
pub fn kd_topk_loss(tape: &mut Tape, student_logits: Var, targets: &KdTargets, renormalize: bool) -> Result<Var> {
    let (n, v) = tape.value(student_logits).dims2();
    let k = targets.k;
    if k == 0 || k > v || targets.indices.len() != n * k || targets.probs.len() != n * k {
        return Err(Error::ShapeMismatch { op: "kd_topk_loss", shapes: vec![vec![n, v], vec![targets.indices.len(), k]] });
    }
    if let Some(&bad) = targets.indices.iter().find(|&&i| i >= v) {
        return Err(Error::IndexOutOfRange { what: "teacher index", index: bad, limit: v });
    }
    let mut p = targets.probs.clone();
    if renormalize {
        for row in p.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
    }
    let self_term: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let lsm = tape.log_softmax(student_logits)?;
    let picked = tape.gather_elements(lsm, &targets.indices, k)?;
    let w = tape.constant(crate::Tensor::new(vec![n, k], p)?);
    let cross = tape.mul(picked, w)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0 / n as f64)?;
    tape.add_scalar(neg, self_term / n as f64)
}

/// Mean next-token negative log-likelihood.
pub fn clm_loss(tape: &mut Tape, logits: Var, targets: &[u32]) -> Result<Var> {
    let (n, v) = tape.value(logits).dims2();
    if targets.len() != n {
        return Err(Error::ShapeMismatch { op: "clm_loss", shapes: vec![vec![n, v], vec![targets.len()]] });
    }
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
        return Err(Error::IndexOutOfRange { what: "target", index: bad, limit: v });
    }
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.gather_elements(lsm, &idx, 1)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// `main + coef * max(aux - 1, 0)`.
pub fn total_loss(tape: &mut Tape, main: Var, aux: Option<Var>, coef: f64) -> Result<Var> {
    if !tape.scalar_value(main).is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    let Some(aux) = aux else { return Ok(main) };
    let a = tape.scalar_value(aux);
    if !a.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    if coef == 0.0 || a <= 1.0 {
        return Ok(main);
    }
    let centered = tape.add_scalar(aux, -1.0)?;
    let term = tape.scale(centered, coef)?;
    tape.add(main, term)
}

/// Optimizer, step counter, eval-loss history and sampling stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub opt: AdamW,
    pub history: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &DistillConfig, seed: u64) -> Self {
        Self { step: 0, opt: AdamW::new(cfg.weight_decay), history: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn push_eval(&mut self, loss: f64, window: usize) {
        self.history.push(loss);
        let cap = 2 * window;
        if self.history.len() > cap {
            self.history.drain(..self.history.len() - cap);
        }
    }
}

/// Training sequences plus the optional teacher cache covering them.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub seqs: &'a [Vec<u32>],
    pub seq_len: usize,
    pub teacher: Option<&'a TeacherCache>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub lr: f64,
    pub tokens: usize,
}

pub fn sample_batch(state: &mut TrainState, n_train: usize, n_seqs: usize) -> Vec<usize> {
    (0..n_seqs).map(|_| state.rng.random_range(0..n_train)).collect()
}

/// One forward/backward/update on the sequences `ids`.
pub fn distill_step(
    model: &mut Model,
    state: &mut TrainState,
    data: TrainData<'_>,
    ids: &[usize],
    kind: LossKind,
    cfg: &DistillConfig,
    mask: Option<&ForwardMask>,
) -> Result<StepReport> {
    let l = data.seq_len;
    let refs: Vec<&[u32]> = ids.iter().map(|&i| data.seqs[i].as_slice()).collect();
    let (inputs, targets) = flatten_batch(&refs, l);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inputs, l, true, mask)?;
    let main = match kind {
        LossKind::Clm => clm_loss(&mut tape, out.logits, &targets)?,
        LossKind::KdTopk => {
            let cache = data.teacher.ok_or_else(|| Error::Missing("teacher cache for kd_topk loss".into()))?;
            let t = cache.targets(ids, l)?;
            kd_topk_loss(&mut tape, out.logits, &t, cfg.renormalize)?
        }
    };
    let aux = out.aux.map(|a| tape.scalar_value(a)).unwrap_or(0.0);
    let loss = total_loss(&mut tape, main, out.aux, cfg.aux_coef)?;
    let report_main = tape.scalar_value(main);
    let loss_val = tape.scalar_value(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite { op: "distill_step" });
    }
    let grads = tape.backward(loss)?;
    let lr = cosine_lr(state.step + 1, cfg);
    state.opt.step(model.params_mut(), &grads, lr, cfg.grad_clip)?;
    state.step += 1;
    Ok(StepReport { loss: loss_val, main: report_main, aux, lr, tokens: inputs.len() })
}

/// One line of the training metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub tokens: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub aux: f64,
    pub lr: f64,
    pub stage: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Budget,
    Plateau,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub tokens: u64,
    pub stopped_early: bool,
    pub records: Vec<MetricRecord>,
}

/// Options for one contiguous training phase.
#[derive(Clone, Copy)]
pub struct PhaseOpts<'a> {
    pub kind: LossKind,
    pub steps: u64,
    pub stop: StopRule,
    pub stage: usize,
    /// Tokens consumed before this phase, for the log.
    pub tokens_before: u64,
    pub eval: &'a [Vec<u32>],
    pub mask: Option<&'a ForwardMask>,
}

/// Train for up to `opts.steps` steps; `cfg.total_steps` drives the
/// learning-rate schedule and should equal `opts.steps` for a fresh phase.
pub fn train_phase(model: &mut Model, state: &mut TrainState, data: TrainData<'_>, cfg: &DistillConfig, opts: PhaseOpts<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let l = data.seq_len;
    let per_batch = (cfg.batch_tokens / l).max(1);
    let eval_set = &opts.eval[..opts.eval.len().min(cfg.eval_seqs.max(1))];
    let mut tokens = 0u64;
    let mut records = Vec::new();
    let mut since = (0.0, 0u64);
    let mut stopped_early = false;
    let mut done = 0;
    for s in 1..=opts.steps {
        let ids = sample_batch(state, data.seqs.len(), per_batch);
        let r = distill_step(model, state, data, &ids, opts.kind, cfg, opts.mask)?;
        tokens += r.tokens as u64;
        since.0 += r.main;
        since.1 += 1;
        done = s;
        if s % cfg.eval_every == 0 || s == opts.steps {
            let ev = evaluate(model, eval_set, l, opts.mask)?;
            state.push_eval(ev.cross_entropy, cfg.plateau_window);
            records.push(MetricRecord {
                step: state.step,
                tokens: opts.tokens_before + tokens,
                train_loss: since.0 / since.1 as f64,
                eval_loss: ev.cross_entropy,
                eval_acc: ev.accuracy,
                aux: r.aux,
                lr: r.lr,
                stage: opts.stage,
            });
            since = (0.0, 0);
            if opts.stop == StopRule::Plateau
                && s < opts.steps
                && plateau_early_stop(&state.history, cfg.plateau_window, cfg.plateau_eps)
            {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { steps: done, tokens, stopped_early, records })
}
