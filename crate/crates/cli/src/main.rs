use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::Config;

/// Errors grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Guard(String),
    Io(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Guard(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Guard(m) => write!(f, "guard violation: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<condiff::Error> for CliError {
    fn from(e: condiff::Error) -> Self {
        use condiff::Error as E;
        let msg = e.to_string();
        match e {
            E::StateSpaceTooLarge { .. } | E::IndexOverflow { .. } => CliError::Guard(msg),
            E::Io(_) | E::Parse { .. } | E::Format(_) | E::Json(_) => CliError::Io(msg),
            E::InvalidParameter(_) | E::InvalidAlphabet(_) | E::DimensionMismatch(_) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "condiff", version, about = "Discrete diffusion with learned single-site conditionals")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Largest state space, in bits, that may be enumerated.
    #[arg(long, global = true)]
    guard_bits: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the model and exact (or Glauber) train/test samples.
    GenData,
    /// Train conditionals on a sample file and write a checkpoint.
    Train {
        /// Defaults to `<out>/train.txt`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reverse-sample from a checkpoint.
    Sample {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score generated samples against reference samples or a model.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// Reference sample file.
        #[arg(long, conflicts_with = "model")]
        reference: Option<PathBuf>,
        /// Reference model JSON; enables exact TV.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated: tv, cross-correlation, mmd.
        #[arg(long, default_value = "tv,cross-correlation")]
        metrics: String,
    },
    /// Check the reverse-chain TV bound on the configured model.
    Verify,
    /// Random hyperparameter search.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run a named pipeline: ea-trend, potts-trend, harsh-vs-soft, local-vs-global.
    Experiment { name: String },
}

fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(bits) = cli.guard_bits {
        config.guard_bits = bits;
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve(&cli)?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("{}: {e}", cli.out.display())))?;
    commands::dispatch(&cli.command, config, &cli.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
