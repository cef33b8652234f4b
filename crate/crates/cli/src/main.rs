mod analyze;
mod config;
mod io;
mod search;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent input; exit code 2.
    Config(String),
    /// Failure while running; exit code 3.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gnas",
    version,
    about = "Greedy supernet training and evolutionary architecture search"
)]
struct Cli {
    /// Cap on worker threads for concurrent evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and $GNAS_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config_path(&self) -> Result<&std::path::Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config is required".into()))
    }

    /// Directory that relative paths in the config are resolved against.
    fn base_dir(&self) -> PathBuf {
        self.config
            .as_deref()
            .and_then(|p| p.parent())
            .map(|p| p.to_path_buf())
            .unwrap_or_default()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet with greedy path filtering.
    Train {
        #[command(flatten)]
        common: Common,
        /// Only print the cost ledger of the configured (or default
        /// ImageNet-scale) run; no training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evolutionary search over a trained supernet or an oracle.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Correlation, confidence-curve and pool-trace analyses.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic space and tabular oracle.
    OracleGen {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train {
            common,
            dry_run: true,
        } => train::run_dry(&common),
        Command::Train {
            common,
            dry_run: false,
        } => train::run_train(&common),
        Command::Search { common } => search::run_search(&common),
        Command::Analyze { common } => analyze::run_analyze(&common),
        Command::OracleGen { common } => analyze::run_oracle_gen(&common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
