//! Command-line front end. Each verb runs one stage and reads or writes the stage files in
//! `--out-dir`:
//!
//! | verb       | reads                      | writes                              |
//! |------------|----------------------------|-------------------------------------|
//! | `synth`    |                            | `manifest.json`, `shots/`           |
//! | `mine`     | manifest                   | `cmps.jsonl`                        |
//! | `align`    | manifest, `cmps.jsonl`     | `alignments.jsonl`                  |
//! | `evaluate` | manifest, `alignments.jsonl` | `records.jsonl`                   |
//! | `report`   | `records.jsonl`            | `pr.csv`, `summary.json`            |
//! | `run`      | manifest                   | all of the above but the corpus     |

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{parse_operating_points, ConfigError, Method, PipelineConfig};
use crate::corpus::{load_corpus, save_corpus, CorpusError};
use crate::pipeline::{align_all, evaluate_all, mine_cmps, AlignmentRecord, CmpRecord, EvaluationRecord, PipelineError};
use crate::report::{emit_report, write_pr_csv, Report};
use crate::synth::generate_synthetic;

pub const CMPS_FILE: &str = "cmps.jsonl";
pub const ALIGNMENTS_FILE: &str = "alignments.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const PR_FILE: &str = "pr.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "cmpalign", version, about = "Mine and align consistent motion pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// FG, IM, TM, TM+FG or TTPS+FG.
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Seed for RANSAC, TTPS, the codebook and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated maximum outlier fractions.
    #[arg(long, global = true)]
    pub operating_points: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// Mine CMPs.
    Mine,
    /// Align mined CMPs.
    Align,
    /// Evaluate alignments against landmarks.
    Evaluate,
    /// Precision-recall report from evaluated records.
    Report,
    /// Mine, align, evaluate and report.
    Run,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Mine => "mine",
            Command::Align => "align",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Corpus(e) => e.code(),
            CliError::Pipeline(_) => "pipeline",
            CliError::Io { .. } => "io",
            CliError::Record { .. } => "record",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Corpus(_) => 4,
            CliError::Pipeline(_) => 5,
            CliError::Io { .. } | CliError::Record { .. } => 6,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"status": "error", "code": self.code(), "message": self.to_string()})
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synthetic.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(ops) = &cli.operating_points {
        cfg.operating_points = parse_operating_points(ops).map_err(CliError::Usage)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Record {
            path: path.display().to_string(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_report(dir: &Path, report: &Report) -> Result<(), CliError> {
    let pr = dir.join(PR_FILE);
    let f = fs::File::create(&pr).map_err(|e| io_err(&pr, e))?;
    write_pr_csv(f, &report.curve.points).map_err(|e| io_err(&pr, e))?;
    let sp = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_vec_pretty(&report.summary).map_err(|e| io_err(&sp, e))?;
    text.push(b'\n');
    fs::write(&sp, text).map_err(|e| io_err(&sp, e))
}

/// Runs one invocation and returns its machine-readable success summary.
pub fn execute(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve_config(cli)?;
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let manifest = || {
        cli.manifest
            .clone()
            .ok_or_else(|| CliError::Usage(format!("{} needs --manifest", cli.command.name())))
    };
    let at = |name: &str| out_dir.join(name);
    let mut summary = json!({"status": "ok", "command": cli.command.name()});

    match cli.command {
        Command::Synth => {
            let synth = generate_synthetic(&cfg.synthetic).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))?;
            let path = save_corpus(&synth.corpus, &out_dir)?;
            summary["manifest"] = json!(path.display().to_string());
            summary["shots"] = json!(synth.corpus.shots.len());
        }
        Command::Mine => {
            let corpus = load_corpus(&manifest()?)?;
            let (_, cmps) = mine_cmps(&corpus, &cfg)?;
            write_jsonl(&at(CMPS_FILE), &cmps)?;
            summary["cmps"] = json!(cmps.len());
        }
        Command::Align => {
            let corpus = load_corpus(&manifest()?)?;
            let cmps: Vec<CmpRecord> = read_jsonl(&at(CMPS_FILE))?;
            let alignments = align_all(&corpus, &cmps, &cfg)?;
            write_jsonl(&at(ALIGNMENTS_FILE), &alignments)?;
            summary["aligned"] = json!(alignments.iter().filter(|a| a.failure.is_none()).count());
            summary["failed"] = json!(alignments.iter().filter(|a| a.failure.is_some()).count());
        }
        Command::Evaluate => {
            let corpus = load_corpus(&manifest()?)?;
            let alignments: Vec<AlignmentRecord> = read_jsonl(&at(ALIGNMENTS_FILE))?;
            let records = evaluate_all(&corpus, &alignments, &cfg)?;
            write_jsonl(&at(RECORDS_FILE), &records)?;
            summary["records"] = json!(records.len());
        }
        Command::Report => {
            let records: Vec<EvaluationRecord> = read_jsonl(&at(RECORDS_FILE))?;
            let report = emit_report(&records, &cfg.operating_points, &cfg.eval);
            write_report(&out_dir, &report)?;
            summary["average_precision"] = json!(report.summary.average_precision);
        }
        Command::Run => {
            let corpus = load_corpus(&manifest()?)?;
            let (_, cmps) = mine_cmps(&corpus, &cfg)?;
            write_jsonl(&at(CMPS_FILE), &cmps)?;
            let alignments = align_all(&corpus, &cmps, &cfg)?;
            write_jsonl(&at(ALIGNMENTS_FILE), &alignments)?;
            let records = evaluate_all(&corpus, &alignments, &cfg)?;
            write_jsonl(&at(RECORDS_FILE), &records)?;
            let report = emit_report(&records, &cfg.operating_points, &cfg.eval);
            write_report(&out_dir, &report)?;
            summary["cmps"] = json!(cmps.len());
            summary["failed"] = json!(report.summary.n_failed);
            summary["correct"] = json!(report.summary.n_correct);
            summary["average_precision"] = json!(report.summary.average_precision);
        }
    }
    Ok(summary)
}
