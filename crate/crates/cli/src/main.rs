use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use moeslim::distill::{LossKind, TeacherCache};
use moeslim::eval::{all_pairs_similarity, emit_report, gen_synthetic_corpus, TaskSpec};
use moeslim::persist::{load_checkpoint, save_checkpoint, Checkpoint, RunLock};
use moeslim::pipeline::{
    collect_runs, distill_model, prepare_teacher, prune_model, run_pipeline, score_model, Arm, PruneMode, RunConfig, RUN_CONFIG_FILE,
    TEACHER_CKPT,
};
use moeslim::schedule::write_metric_log;
use moeslim::{Error, Result};

#[derive(Parser)]
#[command(name = "moeslim", version, about = "Prune and distill small mixture-of-experts transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Kd,
    Clm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Slim,
    Gqa,
    DropExpert,
    DenseFfn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Multistage,
    Oneshot,
    Iterative,
    DropExpert,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a run configuration preset as JSON.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Run directory recorded in the config.
        #[arg(long)]
        out_dir: PathBuf,
        /// Destination file; defaults to `<out-dir>/run_config.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the teacher described by a run configuration.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Store the teacher's top-k next-token distribution over a corpus.
    CacheTeacher {
        #[arg(long)]
        ckpt: PathBuf,
        /// Run configuration or task spec JSON describing the corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity-score a checkpoint on calibration data.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        /// Teacher cache; required for `--loss kd`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "kd")]
        loss: Loss,
        /// Run configuration supplying corpus and calibration settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output checkpoint carrying the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Structurally prune a checkpoint using a scored report.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        /// Checkpoint written by `score`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Fraction of units kept along the pruned axis.
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a checkpoint toward a cached teacher.
    Distill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher_cache: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Token budget; defaults to the config's total.
        #[arg(long)]
        tokens: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Metric log destination; defaults to the output path with a csv extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run a full compression arm for every configured seed.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        arm: ArmArg,
        /// Override the run directory from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Max-cosine neuron similarity between every pair of experts in a layer.
    AnalyzeExperts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
        /// JSON destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize every run below a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Comparison as `RUN_A:RUN_B`; repeatable.
        #[arg(long = "compare")]
        compare: Vec<String>,
        /// Output directory; defaults to `<runs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn arm(a: ArmArg) -> Arm {
    match a {
        ArmArg::Multistage => Arm::Multistage,
        ArmArg::Oneshot => Arm::Oneshot,
        ArmArg::Iterative => Arm::Iterative,
        ArmArg::DropExpert => Arm::DropExpert,
    }
}

fn task_spec(path: &Path) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str::<RunConfig>(&text) {
        Ok(c) => Ok(c.task),
        Err(_) => Ok(serde_json::from_str(&text)?),
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::InitConfig { preset, out_dir, out } => {
            let cfg = match preset {
                Preset::Desk => RunConfig::desk(&out_dir),
                Preset::Smoke => RunConfig::smoke(&out_dir),
            };
            let dest = out.unwrap_or_else(|| out_dir.join(RUN_CONFIG_FILE));
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent)?;
            }
            cfg.save(&dest)?;
            emit(json!({ "config": dest }));
        }
        Cmd::TrainTeacher { config } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            let corpus = cfg.corpus()?;
            prepare_teacher(&cfg, &corpus)?;
            emit(json!({ "teacher": cfg.out_dir.join(TEACHER_CKPT) }));
        }
        Cmd::CacheTeacher { ckpt, corpus, k, out } => {
            let teacher = load_checkpoint(&ckpt)?.model;
            let corpus = gen_synthetic_corpus(&task_spec(&corpus)?)?;
            let cache = TeacherCache::build(&teacher, &corpus.train, corpus.seq_len(), k)?;
            cache.save(&out)?;
            emit(json!({ "cache": out, "positions": cache.len(), "k": cache.k }));
        }
        Cmd::Score { ckpt, teacher, loss, config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let mut ck = load_checkpoint(&ckpt)?;
            let corpus = cfg.corpus()?;
            let (kind, cache) = match (loss, teacher) {
                (Loss::Kd, Some(p)) => (LossKind::KdTopk, Some(TeacherCache::load(&p)?)),
                (Loss::Kd, None) => return Err(Error::Missing("--teacher cache is required for kd scoring".into())),
                (Loss::Clm, _) => (LossKind::Clm, None),
            };
            let mut report = score_model(&ck.model, cache.as_ref(), &corpus.train, corpus.seq_len(), &cfg, kind, seed)?;
            report.param_scores.clear();
            ck.report = Some(report);
            ck.train_state = None;
            save_checkpoint(&ck, &out)?;
            emit(json!({ "report": out }));
        }
        Cmd::Prune { ckpt, report, mode, ratio, out } => {
            let model = load_checkpoint(&ckpt)?.model;
            let report = load_checkpoint(&report)?.report.ok_or_else(|| Error::Missing("checkpoint has no sensitivity report".into()))?;
            let mode = match mode {
                Mode::Slim => PruneMode::Slim,
                Mode::Gqa => PruneMode::Gqa,
                Mode::DropExpert => PruneMode::DropExpert,
                Mode::DenseFfn => PruneMode::DenseFfn,
            };
            let (pruned, decision) = prune_model(&model, &report, mode, ratio)?;
            let params = pruned.param_count();
            let mut ck = Checkpoint::new(pruned);
            ck.report = Some(report);
            ck.decision = Some(decision);
            save_checkpoint(&ck, &out)?;
            emit(json!({ "ckpt": out, "params": params }));
        }
        Cmd::Distill { ckpt, teacher_cache, config, tokens, seed, out, metrics } => {
            let cfg = RunConfig::load(&config)?;
            let cache = TeacherCache::load(&teacher_cache)?;
            let corpus = cfg.corpus()?;
            let mut ck = load_checkpoint(&ckpt)?;
            let (state, log) = distill_model(&mut ck.model, &cache, &corpus, &cfg.distill, tokens.unwrap_or(cfg.total_tokens), seed)?;
            ck.train_state = Some(state);
            save_checkpoint(&ck, &out)?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            write_metric_log(&metrics, &log)?;
            let last = log.last().map(|r| r.eval_loss);
            emit(json!({ "ckpt": out, "metrics": metrics, "eval_ce": last }));
        }
        Cmd::Pipeline { config, arm: a, out_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            for r in run_pipeline(&cfg, arm(a))? {
                emit(json!({
                    "run": r.run_id,
                    "dir": r.dir,
                    "tokens": r.manifest.total_tokens,
                    "flops": r.manifest.ledger.total_flops().to_string(),
                    "eval_ce": r.final_eval_ce,
                    "aborted": r.aborted,
                }));
            }
        }
        Cmd::AnalyzeExperts { ckpt, layer, out } => {
            let model = load_checkpoint(&ckpt)?.model;
            let pairs = all_pairs_similarity(&model, layer)?;
            let text = serde_json::to_string_pretty(&pairs)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, text)?;
                    emit(json!({ "similarity": p, "pairs": pairs.len() }));
                }
                None => println!("{text}"),
            }
        }
        Cmd::Report { runs, compare, out } => {
            let records = collect_runs(&runs)?;
            let pairs = compare
                .iter()
                .map(|c| {
                    c.split_once(':')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| Error::InvalidConfig(format!("comparison {c} is not RUN_A:RUN_B")))
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = out.unwrap_or_else(|| runs.join("report"));
            let summary = emit_report(&records, &pairs, Some(&dir))?;
            println!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.kind().to_string() }));
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
