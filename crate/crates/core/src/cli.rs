//! Command-line surface: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 missing prerequisite artifact, 4 numeric failure. Failures also emit a
//! one-line JSON error record on stderr and in `output_dir/error.json`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::MODEL_FILE;
use crate::pipeline::{self, Context, TRAIN_DIR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ltv", version, about = "Multi-horizon lifetime-value pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize catalogs, history, funnel and labels into `data/`.
    GenerateData,
    /// Pretrain graph embeddings into `grl/`.
    PretrainGraph,
    /// Train one model at the uniform preference into `train/`.
    Train,
    /// Outer preference search into `search/`.
    Search,
    /// Test metrics of the selected model into `eval/`.
    Evaluate,
    /// Label-drop robustness experiment into `label_drop/`.
    LabelDrop,
    /// Seed-correlation experiment into `seed_correlation/`.
    SeedCorrelation,
    /// Gradient-conflict summary of a step log into `conflict/`.
    ConflictReport {
        /// Step log to summarize (default: search, else train).
        #[arg(long)]
        step_log: Option<PathBuf>,
    },
    /// Day-over-day prediction stability into `stability/`.
    Stability {
        /// First checkpoint (default: train/model.json).
        #[arg(long)]
        day1: Option<PathBuf>,
        /// Second checkpoint (default: the search selection).
        #[arg(long)]
        day2: Option<PathBuf>,
        /// Sample file in the samples JSONL format (default: test split).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::PretrainGraph => "pretrain-graph",
            Command::Train => "train",
            Command::Search => "search",
            Command::Evaluate => "evaluate",
            Command::LabelDrop => "label-drop",
            Command::SeedCorrelation => "seed-correlation",
            Command::ConflictReport { .. } => "conflict-report",
            Command::Stability { .. } => "stability",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::NonFinite(_) | Error::Numeric(_) => "numeric",
        Error::UnknownParam(_) => "unknown_param",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::MissingArtifact(_) => "missing_prerequisite",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

/// Machine-readable failure record.
#[derive(Debug, Serialize)]
pub struct ErrorRecord<'a> {
    pub status: &'static str,
    pub subcommand: &'a str,
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing: Option<String>,
}

/// Resolved configuration: file (or defaults), then flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.workers == 0 {
        return Err(Error::Config("--workers: must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand; returns a one-line JSON summary.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    cfg.write_resolved()?;
    let ctx = Context::new(cfg, cli.workers)?;
    let summary = match &cli.command {
        Command::GenerateData => {
            let ds = pipeline::generate_data(&ctx)?;
            serde_json::json!({ "samples": ds.samples.len(), "events": ds.events.len() })
        }
        Command::PretrainGraph => {
            let e = pipeline::pretrain_graph(&ctx)?;
            serde_json::json!({ "users": e.user.rows(), "games": e.game.rows() })
        }
        Command::Train => {
            let out = pipeline::train(&ctx)?;
            serde_json::json!({ "steps": out.logs.len(), "valid": out.valid })
        }
        Command::Search => {
            let (runs, sel) = pipeline::search(&ctx)?;
            serde_json::json!({ "runs": runs.len(), "best_run": sel.best_run, "score": sel.score })
        }
        Command::Evaluate => serde_json::json!({ "test": pipeline::evaluate(&ctx)? }),
        Command::LabelDrop => {
            let (_, deg) = pipeline::label_drop(&ctx)?;
            let rows: Vec<_> = deg
                .iter()
                .map(|d| serde_json::json!({ "ratio": d.ratio, "variant": d.variant, "degradation": d.degradation }))
                .collect();
            serde_json::json!({ "degradation": rows })
        }
        Command::SeedCorrelation => {
            let (runs, m) = pipeline::seed_correlation(&ctx)?;
            let intra: Vec<_> = crate::metrics::experiments::CorrVariant::ALL
                .iter()
                .map(|&v| (v.as_str(), crate::metrics::experiments::mean_intra_correlation(&runs, &m, v)))
                .collect();
            serde_json::json!({ "runs": runs.len(), "mean_intra": intra })
        }
        Command::ConflictReport { step_log } => {
            let s = pipeline::conflict_report(&ctx, step_log.as_deref())?;
            serde_json::json!({ "steps": s.steps, "conflict_fraction": s.conflict_fraction })
        }
        Command::Stability { day1, day2, samples } => {
            let d1 = day1.clone().unwrap_or_else(|| ctx.dir(TRAIN_DIR).join(MODEL_FILE));
            let d2 = match day2 {
                Some(p) => p.clone(),
                None => pipeline::selected_checkpoint(&ctx)?,
            };
            let rows = pipeline::stability(&ctx, &d1, &d2, samples.as_deref())?;
            let diffs: Vec<f64> = rows.iter().map(|r| r.diff).collect();
            serde_json::json!({ "diff": diffs })
        }
    };
    Ok(serde_json::json!({ "status": "ok", "subcommand": cli.command.name(), "result": summary }).to_string())
}

/// Parses `args`, runs, reports, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(line) => {
            println!("{line}");
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            let rec = ErrorRecord {
                status: "error",
                subcommand: cli.command.name(),
                kind: error_kind(&e),
                exit_code: code,
                message: e.to_string(),
                missing: match &e {
                    Error::MissingArtifact(p) => Some(p.display().to_string()),
                    _ => None,
                },
            };
            let line = serde_json::to_string(&rec).unwrap_or_else(|_| format!("{{\"status\":\"error\",\"exit_code\":{code}}}"));
            eprintln!("{line}");
            if let Ok(cfg) = resolve_config(&cli) {
                let _ = io_util::write_text(&cfg.output_dir.join("error.json"), &format!("{line}\n"));
            }
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("a".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["ltv", "train", "--seed", "11", "--output", "/tmp/x", "--workers", "2"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.output_dir.clone()), (11, PathBuf::from("/tmp/x")));
        assert_eq!(cli.workers, 2);
        let cli = Cli::try_parse_from(["ltv", "train", "--workers", "0"]).unwrap();
        assert!(matches!(resolve_config(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(run(["ltv", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(run(["ltv", "train", "--seed", "abc"]), EXIT_CONFIG);
    }

    #[test]
    fn train_before_generate_names_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["ltv", "train", "--output", out]), EXIT_MISSING);
        let rec = std::fs::read_to_string(dir.path().join("error.json")).unwrap();
        assert!(rec.contains("missing_prerequisite") && rec.contains("users.jsonl"), "{rec}");
        assert!(dir.path().join(crate::config::RESOLVED_FILE).exists());
    }

    #[test]
    fn bad_config_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[pareto]\nepsilon = -1\n").unwrap();
        let out = dir.path().join("out");
        let code = run([
            "ltv",
            "generate-data",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
        let missing = dir.path().join("absent.toml");
        assert_eq!(run(["ltv", "generate-data", "--config", missing.to_str().unwrap()]), EXIT_CONFIG);
    }
}
