//! `svflab`: train toy heads, analyse runs, sweep parameters, check the
//! theory numerically and decompose dumped language-model heads.
//!
//! Errors go to stderr as one JSON object. Exit codes: 0 success, 1 runtime
//! failure, 2 bad usage or unreadable input, 3 a theorem check failed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use svf_core::Error;

#[derive(Parser)]
#[command(name = "svflab", version, about = "Singular-vector analysis of bilinear attention heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model into a run directory.
    Train(TrainArgs),
    /// Analyse a trained run directory.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Train one run per axis value and summarise the alignment.
    Sweep(SweepArgs),
    /// Check the theoretical results numerically.
    VerifyTheorems(VerifyArgs),
    /// Work with dumped language-model heads.
    #[command(subcommand)]
    Lm(Lm),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with optional `model`, `train` and `spec` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    run: PathBuf,
    /// `first`, `last` or a step number.
    #[arg(long, default_value = "last")]
    step: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Analyze {
    /// Singular vectors against features; writes alignment.json.
    Alignment(RunArgs),
    /// Per-pair decomposition on sampled contexts; writes decomposition.csv.
    Decompose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 500)]
        contexts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add a random-basis row for every pair.
        #[arg(long)]
        rotate: bool,
    },
    /// Presence-stratified sparsity at every checkpoint; writes sparsity.json.
    Sparsity {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        contexts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cosine tracking across checkpoints; writes dynamics.json.
    Dynamics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sv-feature")]
        kind: DynamicsKind,
        /// Singular index for `sv-self`.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "left")]
        side: SideArg,
        /// Feature index for `feature-self`.
        #[arg(long, default_value_t = 0)]
        feature: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DynamicsKind {
    SvFeature,
    SvSelf,
    FeatureSelf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Left,
    Right,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec JSON. Without it, `--axis` selects the built-in ladder.
    #[arg(long, conflicts_with = "axis")]
    spec: Option<PathBuf>,
    #[arg(long)]
    axis: Option<String>,
    /// Overrides `base.train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Verifier name; repeat for several. All run when omitted.
    #[arg(long)]
    only: Vec<String>,
    /// Monte-Carlo sample count, e.g. 1e6.
    #[arg(long, value_parser = parse_count)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write verdicts.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the registered verifiers and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Subcommand)]
enum Lm {
    /// Decompose (destination, source) pairs of dumped heads.
    Decompose {
        /// Dump manifest; repeat for several heads.
        #[arg(long, required = true)]
        dump: Vec<PathBuf>,
        /// JSON `{"pairs": [{"head": "L0H1", "dest": 5, "source": 2}]}`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        rotate: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Positions left out of every key set, comma separated.
        #[arg(long, value_delimiter = ',')]
        exclude_positions: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_count(s: &str) -> Result<usize, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e15) {
        return Err(format!("`{s}` is not a positive whole number"));
    }
    Ok(v as usize)
}

/// Failure as reported to the caller.
pub struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }

    pub fn checks_failed(message: impl Into<String>) -> Self {
        Self {
            kind: "check-failed",
            message: message.into(),
            code: 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io { .. } => ("io", 2),
            Error::Json(_) | Error::Csv(_) => ("schema", 2),
            Error::Config(_) => ("config", 2),
            Error::UnknownName { .. } => ("unknown-name", 2),
            Error::MissingCheckpoint(_) => ("missing-checkpoint", 2),
            Error::Checkpoint { .. } => ("checkpoint", 2),
            Error::Manifest(_) | Error::TruncatedArray { .. } | Error::MissingArray(_) | Error::ScaleNotFolded => ("dump", 2),
            Error::Diverged { .. } | Error::OptimizationDiverged(_) => ("diverged", 1),
            _ => ("numerical", 1),
        };
        Self {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            return report(Failure::usage(message.trim_end()));
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message, "exit_code": f.code } }));
    ExitCode::from(f.code)
}
