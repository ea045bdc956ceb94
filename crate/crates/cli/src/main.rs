// SPDX-License-Identifier: Apache-2.0

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use attnuq::metrics::Grouping;
use attnuq::rauq::SelectionScope;
use attnuq::synth::Regime;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, WORKERS_ENV};
use crate::error::{CliError, EXIT_USAGE};

/// Attention-based uncertainty scoring and evaluation for generation traces.
#[derive(Debug, Parser)]
#[command(name = "attnuq", version)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads. UQ_WORKERS overrides this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with a planted attention signal.
    Synth(SynthArgs),
    /// Check every trace of one or more corpora.
    Validate(ValidateArgs),
    /// Score traces with the selected methods.
    Score(ScoreArgs),
    /// Grid-search alpha for RAUQ variants on a labeled corpus.
    Tune(TuneArgs),
    /// Compute AUROC, AURAC and PRR with bootstrap intervals.
    Evaluate(EvaluateArgs),
    /// Write the hallucination map and score histograms.
    Report(ReportArgs),
    /// List method ids.
    Methods {
        #[arg(long)]
        experimental: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Intrinsic,
    Extrinsic,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Intrinsic => Regime::IntrinsicLike,
            RegimeArg::Extrinsic => Regime::ExtrinsicLike,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    PerTrace,
    Calibrated,
}

impl From<ScopeArg> for SelectionScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::PerTrace => SelectionScope::PerTrace,
            ScopeArg::Calibrated => SelectionScope::Calibrated,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GroupingArg {
    Overall,
    ByHalluType,
    ByDataset,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::Overall => Grouping::Overall,
            GroupingArg::ByHalluType => Grouping::ByHalluType,
            GroupingArg::ByDataset => Grouping::ByDataset,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub hallu_fraction: Option<f64>,
    #[arg(long)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    /// Individual trace files.
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Comma-separated method ids.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Allow experimental variants.
    #[arg(long)]
    pub experimental: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub selection_scope: Option<ScopeArg>,
    /// Inclusive layer range `first:last`.
    #[arg(long, value_parser = parse_layer_range)]
    pub layer_range: Option<(usize, usize)>,
}

fn parse_layer_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected first:last")?;
    let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Per-method alpha from `tune`.
    #[arg(long)]
    pub alpha_table: Option<PathBuf>,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Failure sidecar; defaults to `<out>.errors.jsonl`.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Exit 0 even when some traces could not be scored.
    #[arg(long)]
    pub keep_going: bool,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub groupings: Option<Vec<GroupingArg>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Drop score records without a label instead of failing.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json from `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Reports from other models; adds spread.json across all of them.
    #[arg(long = "compare")]
    pub compare: Vec<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if let Some(n) = cfg.resolve_workers(std::env::var(WORKERS_ENV).ok())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::data("workers", e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Validate(a) => commands::validate(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::Tune(a) => commands::tune(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Report(a) => commands::report(cfg, a),
        Command::Methods { experimental } => commands::methods(experimental),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).to_json_line());
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
