//! `entaudit` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "entaudit", version, about = "Entity-bias auditing for LLM classifiers")]
struct Cli {
    /// Path to the TOML config.
    #[arg(long, short, global = true, default_value = "entaudit.toml")]
    config: PathBuf,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Registry inspection.
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Synthetic template generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Plans a run and writes its manifest.
    Plan {
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
    },
    /// Executes (or resumes) a planned run.
    Run(RunArgs),
    /// Scores a store into bias and performance exports.
    Score(ScoreArgs),
    /// Statistical comparisons over a bias export.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Entity similarity matrices and nearest pairs.
    Similarity(SimilarityArgs),
    /// Benchmark alignment.
    #[command(subcommand)]
    Align(AlignCmd),
    /// Writes one export file.
    Export(ExportArgs),
    /// Store maintenance.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Serves the mock backend over HTTP.
    MockServer {
        #[arg(long, default_value = "127.0.0.1:8000")]
        bind: String,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Loads all registries and prints the balance report and summaries as JSON.
    Validate,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generates a label-balanced template set for one task.
    Generate {
        #[arg(long)]
        task: String,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_reseeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "manifest.json")]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Overrides `run.store`.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Stops after this many appended records.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Also writes the completion report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value = "bias.csv")]
    bias_out: PathBuf,
    #[arg(long)]
    performance_out: Option<PathBuf>,
    /// Include per-context δ rows.
    #[arg(long)]
    keep_contexts: bool,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Runs every comparison in a spec file (JSON object or array).
    Compare {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        bias: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Values {
    Raw,
    Delta,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value = "similarity")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    top: usize,
    /// Metadata key reported next to each top pair.
    #[arg(long)]
    group_key: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    language: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_enum, default_value = "raw")]
    values: Values,
    #[arg(long, default_value_t = entaudit_core::similarity::DEFAULT_COVERAGE_THRESHOLD)]
    coverage: f64,
}

#[derive(Subcommand)]
enum AlignCmd {
    /// Masks benchmark items into templates.
    Mask {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlates task scores of real and synthetic stores per model and language.
    Correlate {
        #[arg(long)]
        benchmark: String,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long, default_value = "ZS-Text")]
        variant: String,
        #[arg(long, default_value_t = entaudit_core::alignment::MIN_SUPPORT)]
        min_support: usize,
        /// Appends to an existing reports file if present.
        #[arg(long, default_value = "alignment.json")]
        reports: PathBuf,
    },
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Alignment reports (for `--kind alignment`).
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Metadata keys aggregated in the summary export; defaults to every taxonomy key.
    #[arg(long = "group-key")]
    group_keys: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Writes the JSONL text snapshot.
    Snapshot {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrites the log with one record per key.
    Compact {
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "entaudit=info,warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    commands::dispatch(cli)
}
