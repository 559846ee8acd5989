//! `pgl` command-line pipeline: toy teachers, calibration, scoring, pruning,
//! post-norm absorption, evaluation and verification over `.pgl`
//! checkpoints.
//!
//! Every command writes a JSON report (and, where it produces a model, a
//! checkpoint) into `--out`; standard output carries a short summary.

pub mod error;
pub mod stages;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pgl_core::evaluate::estimate_cost;
use pgl_core::model::{random_init, ModelConfig};
use pgl_core::normfuse::SiteSelection;
use pgl_core::{EvalReport, SurgeryReport};
use serde::Serialize;

pub use error::{CliError, CliResult, FailureKind};
use stages::*;

#[derive(Debug, Parser)]
#[command(
    name = "pgl",
    version,
    about = "Structured pruning for sandwich-norm GQA transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Output {
    /// Directory receiving checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Path of the JSON report, overriding its default place in `--out`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Output {
    fn report_path(&self, default: &str) -> PathBuf {
        self.report
            .clone()
            .unwrap_or_else(|| self.out.join(default))
    }
}

#[derive(Debug, Clone, Args)]
pub struct Input {
    /// Input `.pgl` checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Token file (one sequence per line) or `builtin`.
    #[arg(long, default_value = "builtin")]
    pub calib: CalibSource,
    /// Seed for the builtin calibration set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ToyShape {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 4)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub ffn: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random teacher checkpoint.
    InitToy {
        #[command(flatten)]
        shape: ToyShape,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Collect activation statistics.
    Calibrate {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        output: Output,
    },
    /// Compute importance scores from calibration statistics.
    Score {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        output: Output,
    },
    /// Apply a prune plan (concrete plan or size targets).
    Prune {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        plan: PathBuf,
        /// Skip γ rescaling after channel pruning.
        #[arg(long)]
        no_slnp: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Fold post-module norms into the preceding projections.
    Absorb {
        #[command(flatten)]
        input: Input,
        /// `all`, `attn`, `ffn`, `none` or a list like `attn:0,ffn:1`.
        #[arg(long, default_value = "all")]
        sites: String,
        #[command(flatten)]
        output: Output,
    },
    /// Perplexity, KD loss against a teacher, and cost.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Analytic parameter and flop counts.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference model for the relative speed.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Re-check every invariant of a checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Surgery report the checkpoint must agree with.
        #[arg(long)]
        surgery_report: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Calibrate, score, prune, absorb, evaluate and verify in one run.
    Pipeline {
        #[command(flatten)]
        input: Input,
        /// Plan file; the identity plan when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        sites: String,
        #[arg(long)]
        no_slnp: bool,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything `pipeline` needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub checkpoint: PathBuf,
    pub calib: CalibSource,
    pub plan: Option<PathBuf>,
    pub sites: SiteSelection,
    pub out: PathBuf,
    pub seed: u64,
    pub slnp: bool,
    pub seq_len: usize,
}

impl PipelineConfig {
    /// Referenced paths must exist before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        require_file(&self.checkpoint, "checkpoint")?;
        self.calib.check_exists()?;
        if let Some(p) = &self.plan {
            require_file(p, "plan")?;
        }
        if self.seq_len == 0 {
            return Err(CliError::usage("--seq-len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub teacher_params: usize,
    pub student_params: usize,
    pub layers: (usize, usize),
    pub hidden: (usize, usize),
    pub absorbed_sites: usize,
    pub eval: EvalReport,
}

pub const STATS_FILE: &str = "stats.json";
pub const SCORES_FILE: &str = "scores.json";
pub const PLAN_FILE: &str = "plan.json";
pub const STUDENT_FILE: &str = "student.pgl";
pub const SURGERY_FILE: &str = "surgery_report.json";
pub const ABSORPTION_FILE: &str = "absorption_report.json";
pub const EVAL_FILE: &str = "eval_report.json";
pub const VERIFY_FILE: &str = "verify_report.json";
pub const SUMMARY_FILE: &str = "pipeline_report.json";

/// Runs every stage, writing all artifacts into `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<PipelineSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    let teacher = load_model(&cfg.checkpoint)?;
    let calib = cfg.calib.load(teacher.config.vocab, cfg.seed)?;

    let stats = calibrate(&teacher, &calib)?;
    write_json(&stats, &out.join(STATS_FILE))?;
    let scores = score(&stats.stats)?;
    write_json(&scores, &out.join(SCORES_FILE))?;
    let plan = resolve_plan(&teacher, cfg.plan.as_deref(), &scores)?;
    write_json(&plan, &out.join(PLAN_FILE))?;

    let (pruned, surgery) = prune(&teacher, &stats.stats, &plan, cfg.slnp)?;
    write_json(&surgery, &out.join(SURGERY_FILE))?;
    let (student, absorption) = absorb_sites(&pruned, &calib, &cfg.sites)?;
    write_json(&absorption, &out.join(ABSORPTION_FILE))?;
    save_model(&student, &out.join(STUDENT_FILE))?;

    let held_out = match &cfg.calib {
        CalibSource::Builtin => {
            CalibSource::Builtin.load(teacher.config.vocab, cfg.seed.wrapping_add(1))?
        }
        CalibSource::File(_) => calib.clone(),
    };
    let eval = EvalReport::evaluate(&student, Some(&teacher), &held_out, cfg.seq_len)?;
    write_json(&eval, &out.join(EVAL_FILE))?;
    // Absorption changes the config, so the surgery report is checked
    // against the pre-absorption model.
    verify(&pruned, Some(&surgery))?;
    let verified = verify(&student, None)?;
    write_json(&verified, &out.join(VERIFY_FILE))?;

    let summary = PipelineSummary {
        teacher_params: teacher.param_count(),
        student_params: student.param_count(),
        layers: (teacher.config.num_layers(), student.config.num_layers()),
        hidden: (teacher.config.hidden, student.config.hidden),
        absorbed_sites: absorption.sites.len(),
        eval,
    };
    write_json(&summary, &out.join(SUMMARY_FILE))?;
    Ok(summary)
}

fn written(out: &mut String, path: &Path) {
    let _ = writeln!(out, "wrote {}", path.display());
}

/// Executes one command and returns the stdout summary.
pub fn run(command: &Command) -> CliResult<String> {
    let mut s = String::new();
    match command {
        Command::InitToy {
            shape,
            seed,
            output,
        } => {
            let cfg = ModelConfig::uniform(
                shape.layers,
                shape.hidden,
                shape.heads,
                shape.groups,
                shape.head_dim,
                shape.ffn,
                shape.vocab,
                shape.eps,
            );
            cfg.validate()?;
            let w = random_init(&cfg, *seed);
            let path = output.out.join("teacher.pgl");
            save_model(&w, &path)?;
            #[derive(Serialize)]
            struct InitReport<'a> {
                seed: u64,
                param_count: usize,
                config: &'a ModelConfig,
            }
            let report = output.report_path("init_report.json");
            write_json(
                &InitReport {
                    seed: *seed,
                    param_count: w.param_count(),
                    config: &cfg,
                },
                &report,
            )?;
            let _ = writeln!(
                s,
                "toy teacher: {} layers, d={}, {} params",
                cfg.num_layers(),
                cfg.hidden,
                w.param_count()
            );
            written(&mut s, &path);
            written(&mut s, &report);
        }
        Command::Calibrate { input, output } => {
            let w = load_model(&input.checkpoint)?;
            let calib = input.calib.load(w.config.vocab, input.seed)?;
            let stats = calibrate(&w, &calib)?;
            let report = output.report_path(STATS_FILE);
            write_json(&stats, &report)?;
            let _ = writeln!(
                s,
                "calibrated on {} sequences, {} tokens",
                stats.sequences, stats.stats.token_count
            );
            written(&mut s, &report);
        }
        Command::Score { input, output } => {
            let w = load_model(&input.checkpoint)?;
            let calib = input.calib.load(w.config.vocab, input.seed)?;
            let stats = calibrate(&w, &calib)?;
            let scores = score(&stats.stats)?;
            let report = output.report_path(SCORES_FILE);
            write_json(&scores, &report)?;
            let _ = writeln!(s, "{:<6} {:>12}", "layer", "BI");
            for (l, bi) in scores.layer.iter().enumerate() {
                let _ = writeln!(s, "{l:<6} {bi:>12.6}");
            }
            written(&mut s, &report);
        }
        Command::Prune {
            input,
            plan,
            no_slnp,
            output,
        } => {
            let w = load_model(&input.checkpoint)?;
            let calib = input.calib.load(w.config.vocab, input.seed)?;
            let stats = calibrate(&w, &calib)?;
            let scores = score(&stats.stats)?;
            let plan = resolve_plan(&w, Some(plan), &scores)?;
            let (student, report) = prune(&w, &stats.stats, &plan, !no_slnp)?;
            let path = output.out.join(STUDENT_FILE);
            save_model(&student, &path)?;
            write_json(&plan, &output.out.join(PLAN_FILE))?;
            let report_path = output.report_path(SURGERY_FILE);
            write_json(&report, &report_path)?;
            let _ = writeln!(
                s,
                "pruned: {} -> {} layers, d {} -> {}, {} -> {} params",
                w.config.num_layers(),
                student.config.num_layers(),
                w.config.hidden,
                student.config.hidden,
                w.param_count(),
                student.param_count()
            );
            written(&mut s, &path);
            written(&mut s, &report_path);
        }
        Command::Absorb {
            input,
            sites,
            output,
        } => {
            let sites = parse_sites(sites)?;
            let w = load_model(&input.checkpoint)?;
            let calib = input.calib.load(w.config.vocab, input.seed)?;
            let (student, report) = absorb_sites(&w, &calib, &sites)?;
            let path = output.out.join("absorbed.pgl");
            save_model(&student, &path)?;
            let report_path = output.report_path(ABSORPTION_FILE);
            write_json(&report, &report_path)?;
            let _ = writeln!(s, "absorbed {} post-norms", report.sites.len());
            if let Some(d) = report.probe_max_rel_deviation {
                let _ = writeln!(s, "max relative logit deviation on probe: {d:.3e}");
            }
            written(&mut s, &path);
            written(&mut s, &report_path);
        }
        Command::Eval {
            input,
            teacher,
            seq_len,
            output,
        } => {
            let w = load_model(&input.checkpoint)?;
            let teacher = teacher.as_deref().map(load_model).transpose()?;
            let data = input.calib.load(w.config.vocab, input.seed)?;
            let report = EvalReport::evaluate(&w, teacher.as_ref(), &data, *seq_len)?;
            let path = output.report_path(EVAL_FILE);
            write_json(&report, &path)?;
            s.push_str(&report.to_table());
            written(&mut s, &path);
        }
        Command::Estimate {
            checkpoint,
            teacher,
            seq_len,
            output,
        } => {
            let w = load_model(checkpoint)?;
            let reference = teacher.as_deref().map(load_model).transpose()?;
            let reference = reference.as_ref().map_or(&w.config, |t| &t.config);
            let cost = estimate_cost(&w.config, reference, *seq_len);
            let path = output.report_path("cost_report.json");
            write_json(&cost, &path)?;
            let _ = writeln!(
                s,
                "params {}, flops/token {}, relative speed {:.3}x",
                cost.param_count, cost.flops_per_token, cost.relative_speed
            );
            written(&mut s, &path);
        }
        Command::Verify {
            checkpoint,
            surgery_report,
            output,
        } => {
            let w = load_model(checkpoint)?;
            let surgery: Option<SurgeryReport> = surgery_report
                .as_deref()
                .map(|p| read_json(p, "surgery report"))
                .transpose()?;
            let report = verify(&w, surgery.as_ref())?;
            let path = output.report_path(VERIFY_FILE);
            write_json(&report, &path)?;
            for c in &report.checks {
                let _ = writeln!(s, "ok  {c}");
            }
            written(&mut s, &path);
        }
        Command::Pipeline {
            input,
            plan,
            sites,
            no_slnp,
            seq_len,
            out,
        } => {
            let cfg = PipelineConfig {
                checkpoint: input.checkpoint.clone(),
                calib: input.calib.clone(),
                plan: plan.clone(),
                sites: parse_sites(sites)?,
                out: out.clone(),
                seed: input.seed,
                slnp: !no_slnp,
                seq_len: *seq_len,
            };
            let summary = run_pipeline(&cfg)?;
            let _ = writeln!(
                s,
                "student: {} -> {} layers, d {} -> {}, {} -> {} params, {} post-norms absorbed",
                summary.layers.0,
                summary.layers.1,
                summary.hidden.0,
                summary.hidden.1,
                summary.teacher_params,
                summary.student_params,
                summary.absorbed_sites
            );
            s.push_str(&summary.eval.to_table());
            let _ = writeln!(s, "artifacts in {}", out.display());
        }
    }
    Ok(s)
}
