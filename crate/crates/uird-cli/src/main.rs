//! `uird` command-line runner.
//!
//! Exit codes: 0 success, 1 validation error (bad config, bad arguments,
//! missing files), 2 runtime failure (training divergence, IO faults
//! mid-run).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::Strategy;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "uird", version, about = "ECG novelty detection with SMOTE pseudo-replay continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset (beatset CSV, optional
    /// WFDB-212 record + annotation sidecar, ready-to-run config).
    SynthData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Class spec: comma-separated label:template:count triples,
        /// e.g. N:0:500,L:1:300,R:2:200
        #[arg(long)]
        classes: String,
        /// Additive noise level before standardization.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        /// Also write record.dat (WFDB 212) and record.ann.
        #[arg(long, default_value_t = false)]
        record: bool,
    },
    /// Parse a WFDB-212 record, filter, detect R-peaks, cut beats, split.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full detection + pseudo-replay loop over a beatset.
    RunUird {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a comparison strategy (ewc, joint, madegan_only) on the same
    /// stream and seeds.
    RunBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge run directories into side-by-side comparison tables.
    Report {
        /// Run directories (each holding manifest.json and task_*/).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Write comparison.md/csv here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is not an error
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &uird_core::Error) -> u8 {
    use uird_core::Error::*;
    match e {
        Config(_) | Invalid(_) | Csv { .. } | Parse { .. } => 1,
        _ => 2,
    }
}

fn load_config(path: &PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> uird_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.out_dir = Some(out);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> uird_core::Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            classes,
            noise,
            seed,
            record,
        } => commands::cmd_synth_data(&out, &classes, noise, seed, record),
        Command::Ingest { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            commands::cmd_ingest(&cfg)
        }
        Command::RunUird { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            commands::cmd_run_uird(&cfg).map(|_| ())
        }
        Command::RunBaseline {
            config,
            strategy,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            let strategy = Strategy::parse(&strategy)?;
            commands::cmd_run_baseline(&cfg, strategy).map(|_| ())
        }
        Command::Report { runs, out } => commands::cmd_report(&runs, out.as_deref()).map(|_| ()),
    }
}
