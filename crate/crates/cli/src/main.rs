//! `scmc` command-line driver: data generation, training, evaluation and comparison.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scmc_core::harness::Mode;
use scmc_core::pipeline::{self, PipelineConfig, PipelineError};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "scmc", version, about = "State-conditioned memory compilation runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for episodes and rollouts.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Comma-separated modes (no_mem, ammi, scmc).
    #[arg(long, global = true, value_delimiter = ',')]
    mode: Option<Vec<String>>,
    /// Validate the configuration and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Build the catalog, memory banks and teacher SFT data.
    GenData,
    /// Supervised training of compiler, Soft-Mem and executor.
    Sft,
    /// Group-relative policy optimization of the compiler.
    Grpo,
    /// Run the configured modes and write per-episode traces.
    Eval,
    /// Evaluate every mode and write the comparison report.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Sft => "sft",
            Command::Grpo => "grpo",
            Command::Eval => "eval",
            Command::Compare => "compare",
        }
    }
}

/// Failure reported as one JSON line on stderr.
#[derive(Debug, Serialize)]
struct CliError {
    error: &'static str,
    message: String,
}

impl CliError {
    fn new(error: &'static str, message: impl ToString) -> Self {
        Self { error, message: message.to_string().replace('\n', " ") }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact(_) => "missing_artifact",
            PipelineError::Io { .. } => "io",
            PipelineError::Train(_) => "train",
            PipelineError::Harness(_) => "harness",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Memory(_) => "memory",
            PipelineError::Env(_) => "env",
            PipelineError::Remote(_) => "remote",
            PipelineError::Pool(_) => "pool",
        };
        CliError::new(kind, e)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::new("config", format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(list) = &cli.mode {
        cfg.eval.modes = list
            .iter()
            .map(|m| m.parse::<Mode>().map_err(|e| CliError::new("config", e)))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new("io", e))?;
    writeln!(std::io::stdout().lock(), "{text}").map_err(|e| CliError::new("io", e))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if cli.dry_run {
        let mut out = std::io::stdout().lock();
        for line in cfg.plan(cli.command.name()) {
            writeln!(out, "{line}").map_err(|e| CliError::new("io", e))?;
        }
        return Ok(());
    }
    match cli.command {
        Command::GenData => print_json(&pipeline::cmd_gen_data(&cfg)?),
        Command::Sft => {
            let rows = pipeline::cmd_sft(&cfg)?;
            print_json(&rows.last())
        }
        Command::Grpo => {
            let rows = pipeline::cmd_grpo(&cfg)?;
            print_json(&rows.last())
        }
        Command::Eval => {
            let run = pipeline::cmd_eval(&cfg)?;
            let ok = run.traces.iter().filter(|t| t.success).count();
            print_json(&serde_json::json!({"episodes": run.traces.len(), "successes": ok}))
        }
        Command::Compare => print_json(&pipeline::cmd_compare(&cfg)?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.error)));
            ExitCode::FAILURE
        }
    }
}
