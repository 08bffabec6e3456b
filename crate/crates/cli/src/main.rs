mod bench;
mod data;
mod dynamics;
mod intervene;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use output::Usage;

/// Visual-token analysis over activation-dump bundles.
#[derive(Debug, Parser)]
#[command(name = "vistoken", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for sampling and generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format, where a command supports more than one.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Progress messages on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a bundle against a tensor profile.
    Validate(data::ValidateArgs),
    /// Write a synthetic bundle with planted sinks, dead and alive tokens.
    Synth(data::SynthArgs),
    /// Retrieval probes against the vocabulary.
    #[command(subcommand)]
    Probe(data::ProbeCmd),
    /// Anchor clustering of projected visual tokens.
    #[command(subcommand)]
    Cluster(data::ClusterCmd),
    /// Sink-token detection and bos-alignment traces.
    #[command(subcommand)]
    Sinks(data::SinksCmd),
    /// Sink / dead / alive partitioning.
    #[command(subcommand)]
    Partition(data::PartitionCmd),
    /// Per-layer metrics as long-format CSV.
    Dynamics(dynamics::DynamicsArgs),
    /// Build, check and print intervention specs.
    #[command(subcommand)]
    Intervene(intervene::InterveneCmd),
    /// Single-patch benchmark generation, audit and scoring.
    #[command(subcommand)]
    Bench(bench::BenchCmd),
}

/// Shared `--bundle` / `--out` pair.
#[derive(Debug, Args)]
pub struct Io {
    /// Bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(Usage("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Validate(a) => data::validate(g, a),
        Command::Synth(a) => data::synth(g, a),
        Command::Probe(c) => data::probe(g, c),
        Command::Cluster(c) => data::cluster(g, c),
        Command::Sinks(c) => data::sinks(g, c),
        Command::Partition(c) => data::partition(g, c),
        Command::Dynamics(a) => dynamics::run(g, a),
        Command::Intervene(c) => intervene::run(g, c),
        Command::Bench(c) => bench::run(g, c),
    }
}

/// Output piped into a reader that stopped early (`| head`).
fn closed_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = if let Some(io) = c.downcast_ref::<std::io::Error>() {
            Some(io.kind())
        } else {
            c.downcast_ref::<serde_json::Error>()
                .and_then(|j| j.io_error_kind())
        };
        kind == Some(std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) if closed_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("error: {u}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
