//! pskit: command-line surface over the screening toolkit.
//!
//! One subcommand per pipeline stage (chunk, dataset, screen, bench,
//! analytics, manifest), all driven by a single TOML config. Global flags
//! override the config in place: `--seed` replaces every seeded choice,
//! `--backend` flips between the live endpoint and the reply fixtures,
//! `--out` redirects the output directory. Every run, successful or not,
//! writes a machine-readable `summary_<command>.json` next to its outputs;
//! wall-clock values live only in the summary's `metadata` block so reruns
//! with identical inputs produce byte-identical artifacts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use thiserror::Error;

use pskit_core::analytics::AnalyticsError;
use pskit_core::benchmark::BenchmarkError;
use pskit_core::compounds::LibraryError;
use pskit_core::corpus::CorpusError;
use pskit_core::dataset::DatasetError;
use pskit_core::gateway::{BackendKind, GatewayError};
use pskit_core::prompts::PromptError;
use pskit_core::screening::ScreeningError;

use crate::config::RunConfig;

// ==== errors ==============================================================

/// Anything a command can fail with, categorized for the exit report.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Corpus(_) => "corpus",
            CliError::Library(_) => "library",
            CliError::Prompt(_) => "prompt",
            CliError::Gateway(_) => "gateway",
            CliError::Dataset(_) => "dataset",
            CliError::Screening(_) => "screening",
            CliError::Benchmark(_) => "benchmark",
            CliError::Analytics(_) => "analytics",
        }
    }
}

// ==== argument surface ====================================================

#[derive(Parser)]
#[command(name = "pskit", version, about = "Perovskite additive screening toolkit")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "pskit.toml")]
    config: PathBuf,
    /// Override every seeded choice in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the backend kind in the config.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    /// Override the output directory in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Http,
    Mock,
}

impl From<BackendChoice> for BackendKind {
    fn from(choice: BackendChoice) -> Self {
        match choice {
            BackendChoice::Http => BackendKind::Http,
            BackendChoice::Mock => BackendKind::Mock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Slice the corpus documents into overlapping token windows.
    Chunk,
    /// Generate instruction records from the chunk store (and compound
    /// groups, when a library is configured).
    Dataset,
    /// Run or resume the elimination tournament over the compound library.
    Screen,
    /// Score a model against the tiered benchmark with the judge rubric.
    Bench,
    /// Term statistics and a 2-D embedding of the exported dataset.
    Analytics,
    /// Emit the fine-tune manifest with any configured overrides.
    Manifest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Chunk => "chunk",
            Command::Dataset => "dataset",
            Command::Screen => "screen",
            Command::Bench => "bench",
            Command::Analytics => "analytics",
            Command::Manifest => "manifest",
        }
    }
}

// ==== entry point =========================================================

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(&cli.config)?;
    config.apply_overrides(cli.seed, cli.backend.map(Into::into), cli.out);
    let out_dir = config.paths.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|source| CliError::Io { path: out_dir.clone(), source })?;

    let started = Instant::now();
    let result = match cli.command {
        Command::Chunk => commands::chunk(&config),
        Command::Dataset => commands::dataset(&config),
        Command::Screen => commands::screen(&config),
        Command::Bench => commands::bench(&config),
        Command::Analytics => commands::analytics(&config),
        Command::Manifest => commands::manifest(&config),
    };

    let command = cli.command.name();
    let metadata = json!({
        "config": cli.config,
        "generated_at_unix": unix_now(),
        "elapsed_ms": started.elapsed().as_millis() as u64,
    });
    let summary_path = out_dir.join(format!("summary_{command}.json"));
    match result {
        Ok(payload) => {
            let summary = summary_object(command, "ok", payload, metadata);
            write_summary(&summary_path, &summary)?;
            println!("{command}: ok, summary at {}", summary_path.display());
            Ok(())
        }
        Err(err) => {
            let summary = summary_object(
                command,
                "error",
                json!({"category": err.category(), "message": err.to_string()}),
                metadata,
            );
            // Best effort: the original error is the one to report.
            let _ = write_summary(&summary_path, &summary);
            Err(err)
        }
    }
}

// ==== summary =============================================================

fn summary_object(command: &str, status: &str, payload: Value, metadata: Value) -> Value {
    let mut map = serde_json::Map::new();
    map.insert("command".into(), command.into());
    map.insert("status".into(), status.into());
    if let Value::Object(entries) = payload {
        map.extend(entries);
    }
    map.insert("metadata".into(), metadata);
    Value::Object(map)
}

fn write_summary(path: &std::path::Path, summary: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(path, text + "\n")
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
