//! Command-line entry point: run a configured experiment, or compare two runs.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedtier::mnist::load_mnist_dir;
use fedtier::report::{compare, format_comparison, read_csv, write_outputs, ReportError};
use fedtier::sim::{prepare_clients, run, ExperimentConfig, ScenarioKind, SimError, Topology};
use fedtier::MNIST_DIR_ENV;

#[derive(Parser, Debug)]
#[command(
    name = "fedtier",
    version,
    about = "Three-tier federated learning simulator"
)]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for metrics.csv, metrics.json and accuracy.svg.
    #[arg(long, default_value = "results")]
    out: PathBuf,

    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// MNIST directory; falls back to the config, then $FEDTIER_MNIST_DIR.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,

    /// Print the built-in scenarios and exit.
    #[arg(long)]
    list_scenarios: bool,

    /// Suppress per-round progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare final-round per-client accuracies of two metrics.csv files.
    Compare { a: PathBuf, b: PathBuf },
}

enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => Failure::Config(e.to_string()),
            SimError::Data(_) => Failure::Data(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Compare { a, b }) => run_compare(a, b),
        None if cli.list_scenarios => {
            for (kind, about) in ScenarioKind::ALL {
                println!("{:<7} {about}", kind.name());
            }
            Ok(())
        }
        None => run_experiment(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedtier: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run_compare(a: &Path, b: &Path) -> Result<(), Failure> {
    let load = |p: &Path| {
        read_csv(p).map_err(|e| match e {
            ReportError::Io { .. } => Failure::Data(e.to_string()),
            other => Failure::Config(other.to_string()),
        })
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let rows = compare(&ra, &rb).map_err(|e| Failure::Config(e.to_string()))?;
    print!("{}", format_comparison(&rows, "A", "B"));
    Ok(())
}

fn run_experiment(cli: &Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let dir = cli
        .mnist_dir
        .clone()
        .or_else(|| cfg.data.mnist_dir.clone())
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Failure::Data(format!(
                "no MNIST directory: pass --mnist-dir, set data.mnist_dir, or export {MNIST_DIR_ENV}"
            ))
        })?;
    let (mut train, mut test) = load_mnist_dir(&dir).map_err(|e| Failure::Data(e.to_string()))?;
    if let Some(n) = cfg.data.train_limit {
        train = train.head(n);
    }
    if let Some(n) = cfg.data.test_limit {
        test = test.head(n);
    }

    let clients = prepare_clients(&cfg, &train, &test)?;
    drop(train);
    let quiet = cli.quiet;
    let output = run(&cfg, &clients, &mut |ev| {
        if !quiet {
            let accs: Vec<String> = ev
                .metrics
                .per_client
                .iter()
                .map(|c| format!("c{}={:.2}%", c.client_id, 100.0 * c.accuracy))
                .collect();
            eprintln!(
                "round {:>3}  models={}  {}",
                ev.metrics.round,
                ev.metrics.registry_size,
                accs.join("  ")
            );
        }
    })?;

    let topology = match cfg.topology {
        Topology::Standard => "standard FL",
        Topology::ThreeTier => "three-tier FL",
    };
    let title = format!("{topology}, scenario {}", cfg.scenario.name());
    write_outputs(&cli.out, &output.metrics, &title)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(fedge) = &output.fedge {
        fedge
            .export_snapshot(&cli.out.join("registry"))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}
