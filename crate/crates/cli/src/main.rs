mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossloc_core::encoders::Modality;
use crossloc_core::training::Paradigm;

use config::Profile;

#[derive(Parser, Debug)]
#[command(
    name = "crossloc",
    version,
    about = "Cross-modal image / LiDAR place recognition"
)]
struct Cli {
    /// Cap on worker threads (default: all logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world as run directories plus a region file.
    GenWorld {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        places: usize,
        #[arg(long, default_value_t = 4)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoders and write a checkpoint plus a JSON-lines loss log.
    Train(TrainArgs),
    /// Embed every sample of a run into an EVDB file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory (holding a manifest).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        out_evdb: PathBuf,
    },
    /// Rank an EVDB against one sample of a run.
    Query {
        #[arg(long)]
        evdb: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory holding the query sample.
        #[arg(long)]
        query_run: PathBuf,
        /// Sample id inside the query run.
        #[arg(long)]
        query_sample: u64,
        /// Modality of the query.
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long, default_value_t = 25)]
        k: usize,
    },
    /// Evaluate recall over every ordered run pair and modality pairing.
    Eval {
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        regions: Option<PathBuf>,
        /// standard or sparse (default from config).
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for records.txt, summary.txt and curves.csv.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file layered over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// combined or teacher-student.
    #[arg(long, value_parser = parse_paradigm)]
    paradigm: Option<Paradigm>,
    /// Directory of run directories.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Region CSV (default: regions.csv next to the runs directory).
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Epochs per training stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Loss log path (default: checkpoint path with `.log.jsonl` appended).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e: crossloc_core::Error| e.to_string())
}

fn parse_paradigm(s: &str) -> Result<Paradigm, String> {
    s.parse().map_err(|e: crossloc_core::Error| e.to_string())
}

/// Bad flags or configuration; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 usage/config, 2 data, 3 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use crossloc_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Diverged { .. } => 3,
                E::Invalid(_) | E::DigestMismatch => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
        if let Err(e) = pool {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
