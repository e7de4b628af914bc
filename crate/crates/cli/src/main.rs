use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "stct", version, about = "Noisy-label correction with randomly sampled noisy validation splits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Sym,
    Asym,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    Include,
    Exclude,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Theorems,
    Gradients,
    Coverage,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a Gaussian-mixture dataset.
    Gen {
        /// Flat `key = value` mixture description.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the clean labels of a dataset directory.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        noise: NoiseArg,
        #[arg(long)]
        rate: f64,
        #[arg(long, value_enum, default_value = "include")]
        convention: ConventionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write a corrupted copy here instead of updating `--in`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label correction only.
    Nmc {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<in>/nmc`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The full correct/select/train alternation.
    Stct {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites; exits 1 if any report fails.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Persist the reports as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also require agreement with previously persisted reports.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Print a run or correction trace as a table and write CSV curves.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STCT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("STCT_THREADS = {v:?} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    match cli.command {
        Command::Gen { spec, out } => commands::gen(&spec, &out),
        Command::Corrupt {
            input,
            noise,
            rate,
            convention,
            seed,
            out,
        } => commands::corrupt(&input, noise, rate, convention, seed, out.as_deref()),
        Command::Nmc { input, config, out } => commands::nmc(&input, config.as_deref(), out.as_deref()),
        Command::Stct { config, out } => commands::stct(&config, out.as_deref()),
        Command::Verify { suite, out, against } => commands::verify(suite, out.as_deref(), against.as_deref()),
        Command::Report { input } => commands::report(&input),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stct: {e}");
            ExitCode::from(e.code())
        }
    }
}
