//! `stateest`: simulate corpora, train the learned-gain filter, evaluate
//! filters and compare their reports.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::FilterName;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "stateest", version, about = "Radar tracking filter benchmark")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test sequence files.
    Simulate,
    /// Train the learned-gain network; resumes when --checkpoint exists.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a filter over a corpus and write per-step and aggregate reports.
    Evaluate {
        #[arg(long, value_enum)]
        filter: FilterName,
        /// Sequence file; defaults to the test corpus in the output directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Side-by-side table of two or more report.json files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
    /// Recompute error aggregates from a per-step CSV.
    Report { steps: PathBuf },
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("STATEEST_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("STATEEST_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.command {
        Command::Simulate => print!("{}", commands::simulate(&cfg)?),
        Command::Train { checkpoint } => {
            let path = commands::train(&cfg, checkpoint.as_deref(), &mut |line| println!("{line}"))?;
            println!("checkpoint: {}", path.display());
        }
        Command::Evaluate {
            filter,
            corpus,
            checkpoint,
        } => {
            let eval = commands::evaluate(&cfg, filter, corpus.as_deref(), checkpoint.as_deref())?;
            print!("{}", commands::summarize(&eval.report));
            println!("reports: {}", eval.dir.display());
        }
        Command::Compare { reports } => {
            let loaded = reports
                .iter()
                .map(|p| commands::load_report(p))
                .collect::<Result<Vec<_>, _>>()?;
            let (text, csv) = commands::compare(&loaded)?;
            print!("{text}");
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
            let path = cfg.out_dir.join("comparison.csv");
            std::fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
        }
        Command::Report { steps } => println!("{}", commands::report_from_csv(&steps)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
